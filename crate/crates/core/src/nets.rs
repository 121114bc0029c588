//! Network definitions: the one-step generator, the amortized denoiser with
//! `(alpha, sigma)` conditioning, and the discriminator head that reads the
//! denoiser trunk.
//!
//! Networks own their parameters in a [`ParamSet`]. A forward pass first
//! binds the set onto a [`Graph`] (as trainable leaves or as constants) and
//! then threads the resulting [`Var`]s through the layers, so the same
//! network can be differentiated in one pass and frozen in another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every tensor on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "flat parameter vector of length {} for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces values from `other`, which must have identical names and
    /// shapes.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter names differ".into()));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("parameter shape {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Collects gradients for every bound parameter, zeros where the loss
    /// does not reach.
    pub fn grads(&self, bound: &Bound, grads: &crate::autodiff::Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.get(v)).collect()
    }
}

/// Parameter handles on one graph, in [`ParamSet`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    /// Leaky ReLU with slope 0.01.
    LeakyRelu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Silu => g.silu(x),
            Activation::LeakyRelu => g.leaky_relu(x, 0.01),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    fn dims(&self) -> Result<Vec<usize>> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        if dims.contains(&0) {
            return Err(Error::Config(format!("MLP dims must be >= 1, got {dims:?}")));
        }
        Ok(dims)
    }
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("weight shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    w: usize,
    b: Option<usize>,
}

impl Linear {
    fn build(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = params.push(format!("{name}.w"), he_normal(rng, fan_in, fan_out));
        let b = bias.then(|| params.push(format!("{name}.b"), Tensor::zeros(&[1, fan_out])));
        Self { w, b }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.vars[self.w])?;
        match self.b {
            Some(b) => g.add(y, p.vars[b]),
            None => Ok(y),
        }
    }
}

/// Dense layers with an activation between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    fn build(params: &mut ParamSet, prefix: &str, dims: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::build(params, &format!("{prefix}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, activation }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i < last {
                x = self.activation.apply(g, x)?;
            }
        }
        Ok(x)
    }

    fn last(&self) -> Linear {
        *self.layers.last().expect("non-empty mlp")
    }
}

/// One-step sampler `x = g(z)` with `z ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    spec: MlpSpec,
    params: ParamSet,
    mlp: Mlp,
}

impl GeneratorNet {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        let dims = spec.dims()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamSet::new();
        let mlp = Mlp::build(&mut params, "gen", &dims, spec.activation, &mut rng);
        Ok(Self { spec, params, mlp })
    }

    /// Generator for `data_dim`-dimensional data with latent of the same
    /// width.
    pub fn for_data(data_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        Self::new(MlpSpec {
            input_dim: data_dim,
            hidden_dims: hidden.to_vec(),
            output_dim: data_dim,
            activation: Activation::LeakyRelu,
            seed,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn data_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zeroes the output layer weights so `g(z)` equals the output bias.
    pub fn zero_output_weights(&mut self) {
        let w = self.mlp.last().w;
        let shape = self.params.get(w).shape().to_vec();
        *self.params.get_mut(w) = Tensor::zeros(&shape);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let shape = g.value(z).shape();
        if shape.len() != 2 || shape[1] != self.latent_dim() {
            return Err(Error::Shape(format!(
                "generator expects [batch, {}] latents, got {shape:?}",
                self.latent_dim()
            )));
        }
        if !g.value(z).is_finite() {
            return Err(Error::NonFinite("generator_forward"));
        }
        self.mlp.forward(g, p, z)
    }

    /// Forward pass on plain values, no gradient.
    pub fn sample(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let x = self.forward(&mut g, &p, zv)?;
        Ok(g.value(x).clone())
    }
}

/// Random Fourier features `[cos(2 pi f_i u), sin(2 pi f_i u)]` with
/// frequencies drawn once from `N(0, scale^2)` and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEmbedding {
    freqs: Vec<f64>,
}

impl FourierEmbedding {
    pub fn new(embedding_dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if embedding_dim == 0 || !embedding_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("Fourier embedding dim must be even, got {embedding_dim}")));
        }
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            freqs: (0..embedding_dim / 2).map(|_| normal.sample(rng)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Embeds each value into one row.
    pub fn embed(&self, us: &[f64]) -> Tensor {
        let half = self.freqs.len();
        let mut data = Vec::with_capacity(us.len() * 2 * half);
        for &u in us {
            let args: Vec<f64> = self.freqs.iter().map(|f| 2.0 * std::f64::consts::PI * f * u).collect();
            data.extend(args.iter().map(|a| a.cos()));
            data.extend(args.iter().map(|a| a.sin()));
        }
        Tensor::matrix(us.len(), 2 * half, data).expect("embedding shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub data_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub alpha_embedding_dim: usize,
    pub noise_embedding_dim: usize,
    pub fourier_scale: f64,
    pub disc_hidden: usize,
    /// `false` drops the alpha path entirely (fake-score and teacher nets).
    pub alpha_conditioning: bool,
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
}

impl ScoreNetConfig {
    pub fn new(data_dim: usize, sigma_data: f64, seed: u64) -> Self {
        Self {
            data_dim,
            hidden_dims: vec![128, 128],
            alpha_embedding_dim: 64,
            noise_embedding_dim: 64,
            fourier_scale: 16.0,
            disc_hidden: 64,
            alpha_conditioning: true,
            sigma_data,
            sigma_min: 0.01,
            sigma_max: 5.0,
            seed,
        }
    }
}

/// EDM skip/output coefficients `(c_skip, c_out)` at noise level `sigma`.
pub fn precondition(sigma: f64, sigma_data: f64) -> (f64, f64) {
    let s2 = sigma * sigma + sigma_data * sigma_data;
    (sigma_data * sigma_data / s2, sigma * sigma_data / s2.sqrt())
}

/// Conditioning values for one forward pass: either one shared `(alpha,
/// sigma)` pair or one pair per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Cond {
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Cond {
    pub fn shared(alpha: f64, sigma: f64) -> Self {
        Self { alpha: vec![alpha], sigma: vec![sigma] }
    }

    pub fn per_row(alpha: Vec<f64>, sigma: Vec<f64>) -> Self {
        Self { alpha, sigma }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self { alpha: vec![alpha; self.alpha.len()], sigma: self.sigma.clone() }
    }

    fn rows(&self, batch: usize) -> Result<usize> {
        let n = self.alpha.len().max(self.sigma.len());
        let ok = |len: usize| len == 1 || len == n;
        if !ok(self.alpha.len()) || !ok(self.sigma.len()) || (n != 1 && n != batch) {
            return Err(Error::Shape(format!(
                "conditioning of {} alphas / {} sigmas for batch {batch}",
                self.alpha.len(),
                self.sigma.len()
            )));
        }
        Ok(n)
    }

    fn expand(v: &[f64], n: usize) -> Vec<f64> {
        if v.len() == n { v.to_vec() } else { vec![v[0]; n] }
    }
}

/// Per-row (or shared) coefficient as a graph constant.
fn coeff(g: &mut Graph, values: Vec<f64>) -> Var {
    if values.len() == 1 {
        g.constant(Tensor::scalar(values[0]))
    } else {
        g.constant(Tensor::column(values))
    }
}

/// Amortized denoiser `f(x_t; alpha, sigma)` with EDM preconditioning and an
/// optional discriminator head on the last trunk feature.
///
/// The conditioning vector `c = silu(W_aux c_aux + W_alpha c_alpha)`, with
/// `c_aux` a Fourier embedding of `ln(sigma) / 4` and `c_alpha` a Fourier
/// embedding of `alpha`, is projected and added to every hidden layer's
/// pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct AmortizedScoreNet {
    config: ScoreNetConfig,
    params: ParamSet,
    alpha_embed: Option<FourierEmbedding>,
    noise_embed: FourierEmbedding,
    w_alpha: Option<usize>,
    w_aux: usize,
    trunk: Vec<Linear>,
    cond_proj: Vec<Linear>,
    out: Linear,
    head: Mlp,
}

/// Trunk outputs of one forward pass.
pub struct TrunkOut {
    /// Raw network output `g_psi`.
    pub raw: Var,
    /// Last hidden activation.
    pub features: Var,
}

impl AmortizedScoreNet {
    pub fn new(config: ScoreNetConfig) -> Result<Self> {
        if config.data_dim == 0 || config.hidden_dims.is_empty() || config.hidden_dims.contains(&0) {
            return Err(Error::Config("score net needs data_dim >= 1 and non-empty hidden dims".into()));
        }
        if !(config.sigma_data > 0.0) || !(0.0 < config.sigma_min && config.sigma_min < config.sigma_max) {
            return Err(Error::Config("score net needs sigma_data > 0 and 0 < sigma_min < sigma_max".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let alpha_embed = if config.alpha_conditioning {
            Some(FourierEmbedding::new(config.alpha_embedding_dim, config.fourier_scale, &mut rng)?)
        } else {
            None
        };
        let noise_embed = FourierEmbedding::new(config.noise_embedding_dim, config.fourier_scale, &mut rng)?;
        let width = config.hidden_dims[0];
        let mut params = ParamSet::new();
        let w_alpha = alpha_embed
            .as_ref()
            .map(|e| params.push("cond.w_alpha", he_normal(&mut rng, e.dim(), width)));
        let w_aux = params.push("cond.w_aux", he_normal(&mut rng, noise_embed.dim(), width));

        let mut dims = vec![config.data_dim];
        dims.extend(&config.hidden_dims);
        let mut trunk = Vec::new();
        let mut cond_proj = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            trunk.push(Linear::build(&mut params, &format!("trunk.{i}"), w[0], w[1], true, &mut rng));
            cond_proj.push(Linear::build(&mut params, &format!("cond.proj.{i}"), width, w[1], false, &mut rng));
        }
        let last = *config.hidden_dims.last().expect("non-empty");
        let out = Linear::build(&mut params, "trunk.out", last, config.data_dim, true, &mut rng);
        let head = Mlp::build(&mut params, "disc", &[last, config.disc_hidden, 1], Activation::Silu, &mut rng);
        // a fresh head reports logit 0, i.e. density ratio 1
        let hw = head.last().w;
        let shape = params.get(hw).shape().to_vec();
        *params.get_mut(hw) = Tensor::zeros(&shape);
        Ok(Self {
            config,
            params,
            alpha_embed,
            noise_embed,
            w_alpha,
            w_aux,
            trunk,
            cond_proj,
            out,
            head,
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn sigma_data(&self) -> f64 {
        self.config.sigma_data
    }

    /// Zeroes `W_alpha`, making the output independent of alpha.
    pub fn zero_alpha_weights(&mut self) {
        if let Some(i) = self.w_alpha {
            let shape = self.params.get(i).shape().to_vec();
            *self.params.get_mut(i) = Tensor::zeros(&shape);
        }
    }

    /// Zeroes the raw output layer so that `g_psi = 0`.
    pub fn zero_output(&mut self) {
        for i in [Some(self.out.w), self.out.b].into_iter().flatten() {
            let shape = self.params.get(i).shape().to_vec();
            *self.params.get_mut(i) = Tensor::zeros(&shape);
        }
    }

    /// Zeroes the discriminator's output layer so that every logit is 0.
    pub fn zero_head(&mut self) {
        let last = self.head.last();
        for i in [Some(last.w), last.b].into_iter().flatten() {
            let shape = self.params.get(i).shape().to_vec();
            *self.params.get_mut(i) = Tensor::zeros(&shape);
        }
    }

    fn check_sigma(&self, sigma: &[f64]) -> Result<()> {
        let (lo, hi) = (self.config.sigma_min, self.config.sigma_max);
        match sigma.iter().find(|&&s| !(lo * (1.0 - 1e-12)..=hi * (1.0 + 1e-12)).contains(&s)) {
            Some(s) => Err(Error::contract(format!("sigma_t {s} outside [{lo}, {hi}]"))),
            None => Ok(()),
        }
    }

    fn check_input(&self, g: &Graph, x_t: Var) -> Result<usize> {
        let shape = g.value(x_t).shape();
        if shape.len() != 2 || shape[1] != self.config.data_dim {
            return Err(Error::Shape(format!(
                "score net expects [batch, {}] inputs, got {shape:?}",
                self.config.data_dim
            )));
        }
        Ok(shape[0])
    }

    fn conditioning(&self, g: &mut Graph, p: &Bound, cond: &Cond, n: usize) -> Result<Var> {
        let noise: Vec<f64> = Cond::expand(&cond.sigma, n).iter().map(|s| s.ln() / 4.0).collect();
        let c_aux = g.constant(self.noise_embed.embed(&noise));
        let mut pre = g.matmul(c_aux, p.vars[self.w_aux])?;
        if let (Some(embed), Some(w)) = (&self.alpha_embed, self.w_alpha) {
            let c_alpha = g.constant(embed.embed(&Cond::expand(&cond.alpha, n)));
            let a = g.matmul(c_alpha, p.vars[w])?;
            pre = g.add(pre, a)?;
        }
        g.silu(pre)
    }

    /// Trunk forward pass returning the raw output and the last hidden
    /// feature.
    pub fn trunk(&self, g: &mut Graph, p: &Bound, x_t: Var, cond: &Cond) -> Result<TrunkOut> {
        let batch = self.check_input(g, x_t)?;
        let n = cond.rows(batch)?;
        self.check_sigma(&cond.sigma)?;
        if self.config.alpha_conditioning && cond.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::contract("alpha outside [0, 1]"));
        }
        // shared conditioning is computed once as a [1, width] row
        let c = self.conditioning(g, p, cond, n)?;
        let mut h = x_t;
        for (layer, proj) in self.trunk.iter().zip(&self.cond_proj) {
            let z = layer.forward(g, p, h)?;
            let cz = proj.forward(g, p, c)?;
            let z = g.add(z, cz)?;
            h = g.silu(z)?;
        }
        let raw = self.out.forward(g, p, h)?;
        Ok(TrunkOut { raw, features: h })
    }

    /// `f = c_skip x_t + c_out g_psi(x_t; alpha, sigma)`.
    pub fn denoise(&self, g: &mut Graph, p: &Bound, x_t: Var, cond: &Cond) -> Result<Var> {
        let out = self.trunk(g, p, x_t, cond)?;
        self.precondition_output(g, x_t, out.raw, &cond.sigma)
    }

    fn precondition_output(&self, g: &mut Graph, x_t: Var, raw: Var, sigma: &[f64]) -> Result<Var> {
        let (skip, outc): (Vec<f64>, Vec<f64>) = sigma
            .iter()
            .map(|&s| precondition(s, self.config.sigma_data))
            .unzip();
        let skip = coeff(g, skip);
        let outc = coeff(g, outc);
        let a = g.mul(x_t, skip)?;
        let b = g.mul(raw, outc)?;
        g.add(a, b)
    }

    /// Discriminator logit `l(x_t; sigma)` read from the trunk at alpha = 1/2;
    /// shape `[batch, 1]`.
    pub fn logit(&self, g: &mut Graph, p: &Bound, x_t: Var, sigma: &[f64]) -> Result<Var> {
        let cond = Cond { alpha: vec![0.5], sigma: sigma.to_vec() };
        let out = self.trunk(g, p, x_t, &cond)?;
        self.head.forward(g, p, out.features)
    }

    /// Denoiser on plain values with frozen parameters.
    pub fn denoise_values(&self, x_t: &Tensor, cond: &Cond) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let f = self.denoise(&mut g, &p, x, cond)?;
        Ok(g.value(f).clone())
    }

    /// Score `(f - x_t) / sigma^2` on plain values.
    pub fn score_values(&self, x_t: &Tensor, cond: &Cond) -> Result<Tensor> {
        let f = self.denoise_values(x_t, cond)?;
        score_from_denoiser_values(&f, x_t, &cond.sigma)
    }

    pub fn logit_values(&self, x_t: &Tensor, sigma: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let l = self.logit(&mut g, &p, x, sigma)?;
        Ok(g.value(l).clone())
    }
}

/// Tweedie: `s = (f - x_t) / sigma^2`, on the graph.
pub fn denoiser_to_score(g: &mut Graph, f: Var, x_t: Var, sigma: &[f64]) -> Result<Var> {
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::contract("denoiser_to_score needs sigma > 0"));
    }
    let inv: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let diff = g.sub(f, x_t)?;
    let c = coeff(g, inv);
    g.mul(diff, c)
}

/// Tweedie on plain values.
pub fn score_from_denoiser_values(f: &Tensor, x_t: &Tensor, sigma: &[f64]) -> Result<Tensor> {
    if f.shape() != x_t.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", f.shape(), x_t.shape())));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::contract("denoiser_to_score needs sigma > 0"));
    }
    let c = x_t.cols();
    let data = f
        .data()
        .iter()
        .zip(x_t.data())
        .enumerate()
        .map(|(i, (a, b))| {
            let s = if sigma.len() == 1 { sigma[0] } else { sigma[i / c] };
            (a - b) / (s * s)
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_score_net(seed: u64) -> AmortizedScoreNet {
        let mut c = ScoreNetConfig::new(2, 1.0, seed);
        c.hidden_dims = vec![16, 16];
        c.alpha_embedding_dim = 8;
        c.noise_embedding_dim = 8;
        c.disc_hidden = 8;
        AmortizedScoreNet::new(c).unwrap()
    }

    fn random_points(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn generator_with_zero_output_weights_returns_bias() {
        let mut gen = GeneratorNet::for_data(2, &[8, 8], 1).unwrap();
        gen.zero_output_weights();
        let b_idx = gen.params().index_of("gen.2.b").unwrap();
        gen.params_mut().get_mut(b_idx).data_mut().copy_from_slice(&[0.25, -1.5]);
        let x = gen.sample(&random_points(5, 2, 3)).unwrap();
        for r in 0..5 {
            assert_eq!(x.row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn generator_is_deterministic_and_checks_dims() {
        let gen = GeneratorNet::for_data(2, &[8], 4).unwrap();
        let z = random_points(6, 2, 5);
        assert_eq!(gen.sample(&z).unwrap(), gen.sample(&z).unwrap());
        assert_eq!(gen.clone(), GeneratorNet::for_data(2, &[8], 4).unwrap());
        assert!(gen.sample(&random_points(6, 3, 5)).is_err());
        assert!(GeneratorNet::for_data(0, &[8], 4).is_err());
    }

    #[test]
    fn preconditioning_coefficients() {
        let (skip, out) = precondition(0.5, 0.5);
        assert!((skip - 0.5).abs() < 1e-15);
        assert!((out - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        let (skip, _) = precondition(1e-4, 1.0);
        assert!((skip - 1.0).abs() < 1e-7);
    }

    #[test]
    fn zero_raw_output_gives_skip_only() {
        let mut net = small_score_net(2);
        net.zero_output();
        let x = random_points(4, 2, 1);
        let f = net.denoise_values(&x, &Cond::shared(0.3, 0.7)).unwrap();
        let (skip, _) = precondition(0.7, 1.0);
        for (a, b) in f.data().iter().zip(x.data()) {
            assert_eq!(*a, skip * b);
        }
    }

    #[test]
    fn denoiser_equals_external_preconditioning() {
        let net = small_score_net(3);
        let x = random_points(5, 2, 2);
        let cond = Cond::shared(0.4, 0.8);
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let raw = net.trunk(&mut g, &p, xv, &cond).unwrap().raw;
        let raw = g.value(raw).clone();
        let f = net.denoise_values(&x, &cond).unwrap();
        let (skip, out) = precondition(0.8, 1.0);
        for i in 0..x.numel() {
            assert_eq!(f.data()[i], skip * x.data()[i] + out * raw.data()[i]);
        }
    }

    #[test]
    fn zero_alpha_weights_make_output_alpha_free() {
        let mut net = small_score_net(5);
        net.zero_alpha_weights();
        let x = random_points(3, 2, 9);
        let reference = net.denoise_values(&x, &Cond::shared(0.0, 0.6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let a: f64 = rng.random_range(0.0..=1.0);
            assert_eq!(net.denoise_values(&x, &Cond::shared(a, 0.6)).unwrap(), reference);
        }
        // and alpha does matter by default
        let net = small_score_net(5);
        assert_ne!(
            net.denoise_values(&x, &Cond::shared(0.1, 0.6)).unwrap(),
            net.denoise_values(&x, &Cond::shared(0.9, 0.6)).unwrap()
        );
    }

    #[test]
    fn per_row_conditioning_matches_shared() {
        let net = small_score_net(6);
        let x = random_points(4, 2, 3);
        let shared = net.denoise_values(&x, &Cond::shared(0.25, 0.9)).unwrap();
        let rows = net.denoise_values(&x, &Cond::per_row(vec![0.25; 4], vec![0.9; 4])).unwrap();
        assert!(shared.max_abs_diff(&rows) < 1e-14);
        assert!(net.denoise_values(&x, &Cond::per_row(vec![0.25; 3], vec![0.9; 3])).is_err());
    }

    #[test]
    fn sigma_outside_range_is_rejected() {
        let net = small_score_net(7);
        let x = random_points(2, 2, 3);
        assert!(net.denoise_values(&x, &Cond::shared(0.5, 50.0)).is_err());
        assert!(net.denoise_values(&x, &Cond::shared(0.5, 0.001)).is_err());
    }

    #[test]
    fn fresh_head_has_zero_logit() {
        let net = small_score_net(8);
        let l = net.logit_values(&random_points(5, 2, 1), &[0.4]).unwrap();
        assert_eq!(l.shape(), &[5, 1]);
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tweedie_conversion() {
        let x = random_points(4, 2, 11);
        let s = score_from_denoiser_values(&x, &x, &[0.3]).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        let f = random_points(4, 2, 12);
        let s1 = score_from_denoiser_values(&f, &x, &[0.4]).unwrap();
        let s2 = score_from_denoiser_values(&f, &x, &[0.8]).unwrap();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
        // inverse recovers f
        for i in 0..f.numel() {
            assert!((x.data()[i] + 0.16 * s1.data()[i] - f.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_posterior_denoiser_gives_gaussian_score() {
        use crate::oracles::GaussianMixture;
        let (mu, v0, sigma) = (0.7, 0.5, 0.6);
        let gm = GaussianMixture::gaussian(vec![mu], v0).unwrap();
        let conv = gm.convolve(sigma).unwrap();
        for xt in [-1.0, 0.0, 0.3, 2.5] {
            let f = (v0 * xt + sigma * sigma * mu) / (v0 + sigma * sigma);
            let s = score_from_denoiser_values(
                &Tensor::matrix(1, 1, vec![f]).unwrap(),
                &Tensor::matrix(1, 1, vec![xt]).unwrap(),
                &[sigma],
            )
            .unwrap();
            assert!((s.data()[0] - conv.score(&[xt])[0]).abs() < 1e-12);
            assert!((s.data()[0] + (xt - mu) / (v0 + sigma * sigma)).abs() < 1e-12);
        }
    }

    #[test]
    fn fourier_embedding_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = FourierEmbedding::new(6, 16.0, &mut rng).unwrap();
        let t = e.embed(&[0.0, 0.25]);
        assert_eq!(t.shape(), &[2, 6]);
        assert_eq!(&t.row(0)[..3], &[1.0, 1.0, 1.0]);
        assert_eq!(&t.row(0)[3..], &[0.0, 0.0, 0.0]);
        let f0 = e.freqs()[0];
        assert!((t.row(1)[0] - (2.0 * std::f64::consts::PI * f0 * 0.25).cos()).abs() < 1e-15);
        assert!(FourierEmbedding::new(5, 16.0, &mut rng).is_err());
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        use crate::oracles::finite_diff_grad;
        let gen = GeneratorNet::new(MlpSpec {
            input_dim: 2,
            hidden_dims: vec![6, 5],
            output_dim: 2,
            activation: Activation::Silu,
            seed: 3,
        })
        .unwrap();
        let z = random_points(7, 2, 4);
        let target = random_points(7, 2, 8);
        let loss_of = |params: &ParamSet, track: bool| -> (Graph, Bound, Var) {
            let mut g = Graph::new();
            let mut net = gen.clone();
            *net.params_mut() = params.clone();
            let p = net.params().bind(&mut g, track);
            let zv = g.constant(z.clone());
            let t = g.constant(target.clone());
            let x = net.forward(&mut g, &p, zv).unwrap();
            let d = g.sub(x, t).unwrap();
            let sq = g.square(d).unwrap();
            let l = g.mean(sq).unwrap();
            (g, p, l)
        };
        let (g, p, l) = loss_of(gen.params(), true);
        let grads = g.backward(l).unwrap();
        let analytic: Vec<f64> = gen.params().grads(&p, &grads).into_iter().flat_map(Tensor::into_data).collect();
        let flat = gen.params().flatten();
        let numeric = finite_diff_grad(
            |v| {
                let mut ps = gen.params().clone();
                ps.set_flat(v)?;
                let (g, _, l) = loss_of(&ps, false);
                g.value(l).item()
            },
            &flat,
            1e-4,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-5, "{a} vs {n}");
        }
    }
}
