//! Losses for training from scratch: mixture denoising score matching, the
//! adaptively weighted generator gradient, and the alpha-skewed GAN
//! regularizer.
//!
//! Every function builds onto a caller-owned [`Graph`] so the trainer can
//! add several terms before a single backward pass. Which parameters
//! receive gradients is decided by how the caller bound them: the
//! generator surrogate, for instance, only ever sees frozen score-network
//! values.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{score_from_denoiser_values, AmortizedScoreNet, Bound, Cond};
use crate::schedules::alpha_logit;
use crate::tensor::Tensor;

/// Guard added to the denominators of both adaptive weights.
pub const WEIGHT_EPS: f64 = 1e-8;

/// Standard normal tensor of the given shape.
pub fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("noise shape")
}

/// `x + sigma * eps` with `sigma` shared or per row.
pub fn add_noise(x: &Tensor, eps: &Tensor, sigma: &[f64]) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(Error::Shape(format!("noise {:?} for data {:?}", eps.shape(), x.shape())));
    }
    let c = x.cols();
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (a, e))| a + sigma_at(sigma, i / c) * e)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn sigma_at(sigma: &[f64], row: usize) -> f64 {
    if sigma.len() == 1 { sigma[0] } else { sigma[row] }
}

/// Per-noise-level loss weight `(sigma^2 + sigma_data^2) / (sigma sigma_data)^2`,
/// which turns the denoiser residual into a unit-scale regression target.
pub fn edm_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Per-sample record of one score-matching evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDiag {
    pub alpha: f64,
    pub sigma: f64,
    pub sq_residual: f64,
    pub real: bool,
}

/// Mixture score-matching loss on the graph plus per-sample diagnostics.
#[derive(Clone, Debug)]
pub struct ScoreBatchLoss {
    pub loss: Var,
    pub value: f64,
    pub samples: Vec<SampleDiag>,
}

/// Anything that maps `(x_t, alpha, sigma)` to a denoised estimate on a
/// graph. Implemented by [`AmortizedScoreNet`]; tests plug in stubs.
pub trait MixtureDenoiser {
    fn denoise(&self, g: &mut Graph, p: &Bound, x_t: Var, cond: &Cond) -> Result<Var>;
    fn sigma_data(&self) -> f64;
}

impl MixtureDenoiser for AmortizedScoreNet {
    fn denoise(&self, g: &mut Graph, p: &Bound, x_t: Var, cond: &Cond) -> Result<Var> {
        AmortizedScoreNet::denoise(self, g, p, x_t, cond)
    }

    fn sigma_data(&self) -> f64 {
        AmortizedScoreNet::sigma_data(self)
    }
}

/// Noisy real and fake inputs for one score update. `cond` covers the
/// stacked `[real; fake]` rows (one shared value or one per row).
pub struct MixtureBatch {
    pub real: Tensor,
    pub fake: Tensor,
    pub real_noise: Tensor,
    pub fake_noise: Tensor,
    pub cond: Cond,
}

impl MixtureBatch {
    /// Draws fresh noise for both halves with one shared `(alpha, sigma)`.
    pub fn sample<R: Rng + ?Sized>(real: Tensor, fake: Tensor, alpha: f64, sigma: f64, rng: &mut R) -> Self {
        let real_noise = gaussian_noise(rng, real.rows(), real.cols());
        let fake_noise = gaussian_noise(rng, fake.rows(), fake.cols());
        Self {
            real,
            fake,
            real_noise,
            fake_noise,
            cond: Cond::shared(alpha, sigma),
        }
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let (nr, nf) = (self.real.rows(), self.fake.rows());
        if nr == 0 && nf == 0 {
            return Err(Error::contract("empty score batch"));
        }
        if self.real.cols() != self.fake.cols() {
            return Err(Error::Shape("real and fake batches differ in dimension".into()));
        }
        let n = nr + nf;
        if self.cond.alpha.len() != 1 && self.cond.alpha.len() != n
            || self.cond.sigma.len() != 1 && self.cond.sigma.len() != n
        {
            return Err(Error::Shape("conditioning must be shared or per stacked row".into()));
        }
        if self.cond.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::contract("alpha outside [0, 1]"));
        }
        Ok((nr, nf))
    }

    fn alpha(&self, row: usize) -> f64 {
        if self.cond.alpha.len() == 1 { self.cond.alpha[0] } else { self.cond.alpha[row] }
    }

    fn sigma(&self, row: usize) -> f64 {
        sigma_at(&self.cond.sigma, row)
    }

    /// Clean and noisy stacked `[real; fake]` matrices.
    pub fn stacked(&self) -> Result<(Tensor, Tensor)> {
        let (nr, nf) = self.validate()?;
        let d = self.real.cols().max(self.fake.cols());
        let mut clean = self.real.data().to_vec();
        clean.extend_from_slice(self.fake.data());
        let mut noise = self.real_noise.data().to_vec();
        noise.extend_from_slice(self.fake_noise.data());
        let clean = Tensor::matrix(nr + nf, d, clean)?;
        let noise = Tensor::matrix(nr + nf, d, noise)?;
        let noisy = add_noise(&clean, &noise, &self.cond.sigma)?;
        Ok((clean, noisy))
    }

    /// Row weights `alpha / n_real` for real rows and `(1 - alpha) / n_fake`
    /// for fake rows, times the EDM per-sigma weight when enabled.
    fn row_weights(&self, sigma_data: f64, edm_weighting: bool) -> Vec<f64> {
        let (nr, nf) = (self.real.rows(), self.fake.rows());
        (0..nr + nf)
            .map(|i| {
                let a = self.alpha(i);
                let w = if i < nr { a / nr as f64 } else { (1.0 - a) / nf as f64 };
                if edm_weighting {
                    w * edm_weight(self.sigma(i), sigma_data)
                } else {
                    w
                }
            })
            .collect()
    }
}

/// `alpha E_real ||f(x_t) - x||^2 + (1 - alpha) E_fake ||f(x_t) - x||^2`,
/// optionally weighted per noise level.
///
/// The fake batch enters as plain values, so the generator cannot receive
/// a gradient from this loss.
pub fn mixture_dsm_loss<D: MixtureDenoiser>(
    g: &mut Graph,
    net: &D,
    p: &Bound,
    batch: &MixtureBatch,
    edm_weighting: bool,
) -> Result<ScoreBatchLoss> {
    let (nr, _) = batch.validate()?;
    let (clean, noisy) = batch.stacked()?;
    let n = clean.rows();
    let x_t = g.constant(noisy);
    let x = g.constant(clean);
    let f = net.denoise(g, p, x_t, &batch.cond)?;
    let resid = g.sub(f, x)?;
    let sq = g.row_sq_norm(resid)?;
    let sq_vals = g.value(sq).data().to_vec();
    let w = g.constant(Tensor::column(batch.row_weights(net.sigma_data(), edm_weighting)));
    let weighted = g.mul(sq, w)?;
    let loss = g.sum(weighted)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("mixture_dsm_loss"));
    }
    let samples = (0..n)
        .map(|i| SampleDiag {
            alpha: batch.alpha(i),
            sigma: batch.sigma(i),
            sq_residual: sq_vals[i],
            real: i < nr,
        })
        .collect();
    Ok(ScoreBatchLoss { loss, value, samples })
}

/// Which factors of the adaptive generator weight are active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightMode {
    pub w_alpha: bool,
    pub w_dmd: bool,
    /// Denominator guard for both factors.
    pub eps: f64,
}

impl WeightMode {
    pub const FULL: WeightMode = WeightMode { w_alpha: true, w_dmd: true, eps: WEIGHT_EPS };
    pub const NONE: WeightMode = WeightMode { w_alpha: false, w_dmd: false, eps: WEIGHT_EPS };
}

/// Per-sample adaptive weight factors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveWeight {
    pub w_alpha: Vec<f64>,
    pub w_dmd: Vec<f64>,
}

impl AdaptiveWeight {
    pub fn combined(&self) -> Vec<f64> {
        self.w_alpha.iter().zip(&self.w_dmd).map(|(a, b)| a * b).collect()
    }
}

fn row_sq_dist(a: &Tensor, b: &Tensor, r: usize) -> f64 {
    a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `w_alpha = alpha sqrt(|s_0 - s_1|^2 / (|s_0 - s_alpha|^2 + eps))` from
/// three frozen score evaluations. At `alpha = 1` the ratio compares a
/// quantity with itself and is exactly 1.
pub fn w_alpha_from_scores(s0: &Tensor, s_alpha: &Tensor, s1: &Tensor, alpha: f64, eps: f64) -> Vec<f64> {
    (0..s0.rows())
        .map(|r| {
            if alpha == 1.0 {
                1.0
            } else {
                alpha * (row_sq_dist(s0, s1, r) / (row_sq_dist(s0, s_alpha, r) + eps)).sqrt()
            }
        })
        .collect()
}

/// `w_dmd = sigma^2 / (|x - f_0(x_t)|_1 + eps)` per row.
pub fn w_dmd_from_denoiser(x: &Tensor, f0: &Tensor, sigma: &[f64], eps: f64) -> Vec<f64> {
    (0..x.rows())
        .map(|r| {
            let l1: f64 = x.row(r).iter().zip(f0.row(r)).map(|(a, b)| (a - b).abs()).sum();
            let s = sigma_at(sigma, r);
            s * s / (l1 + eps)
        })
        .collect()
}

/// Frozen score evaluations the generator update needs.
pub struct GeneratorScores {
    pub s0: Tensor,
    pub s_alpha: Tensor,
    pub s1: Tensor,
    pub f0: Tensor,
}

impl GeneratorScores {
    pub fn evaluate(net: &AmortizedScoreNet, x_t: &Tensor, alpha: f64, sigma: &[f64]) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::contract(format!("generator alpha must be in (0, 1], got {alpha}")));
        }
        let at = |a: f64| Cond { alpha: vec![a], sigma: sigma.to_vec() };
        let f0 = net.denoise_values(x_t, &at(0.0))?;
        let s0 = score_from_denoiser_values(&f0, x_t, sigma)?;
        let s_alpha = net.score_values(x_t, &at(alpha))?;
        let s1 = if alpha == 1.0 { s_alpha.clone() } else { net.score_values(x_t, &at(1.0))? };
        Ok(Self { s0, s_alpha, s1, f0 })
    }
}

/// Per-sample adaptive weights for the generator update; every evaluation
/// is gradient-free.
pub fn adaptive_weight(net: &AmortizedScoreNet, x_t: &Tensor, x: &Tensor, alpha: f64, sigma: &[f64]) -> Result<AdaptiveWeight> {
    let s = GeneratorScores::evaluate(net, x_t, alpha, sigma)?;
    Ok(AdaptiveWeight {
        w_alpha: w_alpha_from_scores(&s.s0, &s.s_alpha, &s.s1, alpha, WEIGHT_EPS),
        w_dmd: w_dmd_from_denoiser(x, &s.f0, sigma, WEIGHT_EPS),
    })
}

/// Generator update on the graph.
#[derive(Clone, Debug)]
pub struct GeneratorUpdate {
    /// Scalar whose gradient with respect to the generator parameters is
    /// the target update direction.
    pub surrogate: Var,
    /// Noisy generator output, still attached to the generator.
    pub x_t: Var,
    /// Mean over the batch of `|s_0 - s_alpha|`.
    pub mean_score_gap: f64,
    pub mean_w_alpha: f64,
    pub mean_w_dmd: f64,
}

/// `mean_i < stop_grad(direction_i), x_t_i >`: backward yields
/// `E[grad_theta g(z)^T direction]` because `x_t = g(z) + sigma eps`.
pub fn surrogate_from_direction(g: &mut Graph, x_t: Var, direction: Tensor) -> Result<Var> {
    if g.value(x_t).shape() != direction.shape() {
        return Err(Error::Shape(format!(
            "direction {:?} for samples {:?}",
            direction.shape(),
            g.value(x_t).shape()
        )));
    }
    let n = direction.rows() as f64;
    let d = g.constant(direction);
    let prod = g.mul(x_t, d)?;
    let s = g.sum(prod)?;
    g.mul_scalar(s, 1.0 / n)
}

/// `w (s_0 - s_alpha) / alpha` per row.
pub fn weighted_direction(s0: &Tensor, s_alpha: &Tensor, weights: &[f64], alpha: f64) -> Result<Tensor> {
    if alpha == 0.0 {
        return Err(Error::contract("generator direction divides by alpha; alpha = 0 given"));
    }
    let c = s0.cols();
    let data = s0
        .data()
        .iter()
        .zip(s_alpha.data())
        .enumerate()
        .map(|(i, (a, b))| weights[i / c] * (a - b) / alpha)
        .collect();
    Tensor::new(s0.shape().to_vec(), data)
}

/// Adds `x_t = x + sigma eps` for generator output `x` on the graph.
pub fn noisy_on_graph(g: &mut Graph, x: Var, eps: &Tensor, sigma: &[f64]) -> Result<Var> {
    let zeros = Tensor::zeros(eps.shape());
    let scaled = add_noise(&zeros, eps, sigma)?;
    let c = g.constant(scaled);
    g.add(x, c)
}

/// Weighted alpha-skew generator surrogate.
///
/// `x` is the generator output on the graph; `eps` the diffusion noise.
/// The score network is evaluated on detached values only.
pub fn generator_surrogate(
    g: &mut Graph,
    net: &AmortizedScoreNet,
    x: Var,
    eps: &Tensor,
    alpha: f64,
    sigma: &[f64],
    mode: WeightMode,
) -> Result<GeneratorUpdate> {
    if !(alpha > 0.0) {
        return Err(Error::contract(format!("generator surrogate needs alpha > 0, got {alpha}")));
    }
    let x_t = noisy_on_graph(g, x, eps, sigma)?;
    let xt_val = g.value(x_t).clone();
    let x_val = g.value(x).clone();
    let s = GeneratorScores::evaluate(net, &xt_val, alpha, sigma)?;
    let n = xt_val.rows();
    let w_alpha = if mode.w_alpha {
        w_alpha_from_scores(&s.s0, &s.s_alpha, &s.s1, alpha, mode.eps)
    } else {
        vec![1.0; n]
    };
    let w_dmd = if mode.w_dmd {
        w_dmd_from_denoiser(&x_val, &s.f0, sigma, mode.eps)
    } else {
        vec![1.0; n]
    };
    let w: Vec<f64> = w_alpha.iter().zip(&w_dmd).map(|(a, b)| a * b).collect();
    let direction = weighted_direction(&s.s0, &s.s_alpha, &w, alpha)?;
    let surrogate = surrogate_from_direction(g, x_t, direction)?;
    let gap = (0..n).map(|r| row_sq_dist(&s.s0, &s.s_alpha, r).sqrt()).sum::<f64>() / n as f64;
    Ok(GeneratorUpdate {
        surrogate,
        x_t,
        mean_score_gap: gap,
        mean_w_alpha: w_alpha.iter().sum::<f64>() / n as f64,
        mean_w_dmd: w_dmd.iter().sum::<f64>() / n as f64,
    })
}

/// `E[sp(-l(x_t) - ln(alpha / (1 - alpha)))]` from logits already on the
/// graph, alpha clamped to `[1e-3, 1 - 1e-3]`.
pub fn gan_generator_loss_from_logits(g: &mut Graph, logits: Var, alpha: f64) -> Result<Var> {
    let shifted = g.add_scalar(logits, alpha_logit(alpha))?;
    let neg = g.neg(shifted)?;
    let sp = g.softplus(neg)?;
    g.mean(sp)
}

/// Non-saturating generator regularizer. `x_t` stays attached to the
/// generator; `p` should be the score network bound frozen.
pub fn gan_generator_loss(g: &mut Graph, net: &AmortizedScoreNet, p: &Bound, x_t: Var, alpha: f64, sigma: &[f64]) -> Result<Var> {
    let logits = net.logit(g, p, x_t, sigma)?;
    gan_generator_loss_from_logits(g, logits, alpha)
}

/// `-alpha E_real[ln D] - (1 - alpha) E_fake[ln(1 - D)]` with
/// `D = sigmoid(l + ln(alpha / (1 - alpha)))`, from logits on the graph.
pub fn gan_discriminator_loss_from_logits(g: &mut Graph, real_logits: Var, fake_logits: Var, alpha: f64) -> Result<Var> {
    if g.value(real_logits).numel() == 0 || g.value(fake_logits).numel() == 0 {
        return Err(Error::contract("empty discriminator batch"));
    }
    let a = crate::schedules::clamp_alpha(alpha);
    let off = alpha_logit(alpha);
    // -ln sigmoid(u) = sp(-u), -ln(1 - sigmoid(u)) = sp(u)
    let r = g.add_scalar(real_logits, off)?;
    let r = g.neg(r)?;
    let r = g.softplus(r)?;
    let r = g.mean(r)?;
    let f = g.add_scalar(fake_logits, off)?;
    let f = g.softplus(f)?;
    let f = g.mean(f)?;
    let r = g.mul_scalar(r, a)?;
    let f = g.mul_scalar(f, 1.0 - a)?;
    g.add(r, f)
}

/// Discriminator loss on noisy real and fake samples (plain values).
pub fn gan_discriminator_loss(
    g: &mut Graph,
    net: &AmortizedScoreNet,
    p: &Bound,
    real_t: &Tensor,
    fake_t: &Tensor,
    alpha: f64,
    sigma: &[f64],
) -> Result<Var> {
    if real_t.rows() == 0 || fake_t.rows() == 0 {
        return Err(Error::contract("empty discriminator batch"));
    }
    let (sr, sf) = split_sigma(sigma, real_t.rows());
    let xr = g.constant(real_t.clone());
    let xf = g.constant(fake_t.clone());
    let lr = net.logit(g, p, xr, &sr)?;
    let lf = net.logit(g, p, xf, &sf)?;
    gan_discriminator_loss_from_logits(g, lr, lf, alpha)
}

/// Splits stacked per-row sigmas into real and fake parts.
pub fn split_sigma(sigma: &[f64], n_real: usize) -> (Vec<f64>, Vec<f64>) {
    if sigma.len() == 1 {
        (sigma.to_vec(), sigma.to_vec())
    } else {
        (sigma[..n_real].to_vec(), sigma[n_real..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{GeneratorNet, ScoreNetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> AmortizedScoreNet {
        let mut c = ScoreNetConfig::new(2, 1.0, seed);
        c.hidden_dims = vec![16, 16];
        c.alpha_embedding_dim = 8;
        c.noise_embedding_dim = 8;
        c.disc_hidden = 8;
        AmortizedScoreNet::new(c).unwrap()
    }

    fn pts(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian_noise(&mut rng, n, 2)
    }

    /// Knows the noise it will be asked to remove.
    struct PerfectDenoiser {
        noise: Tensor,
    }

    impl MixtureDenoiser for PerfectDenoiser {
        fn denoise(&self, g: &mut Graph, _p: &Bound, x_t: Var, cond: &Cond) -> Result<Var> {
            let shift = g.constant(add_noise(&Tensor::zeros(self.noise.shape()), &self.noise, &cond.sigma)?);
            g.sub(x_t, shift)
        }
        fn sigma_data(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = MixtureBatch::sample(pts(5, 1), pts(4, 2), 0.4, 0.7, &mut rng);
        let mut noise = batch.real_noise.data().to_vec();
        noise.extend_from_slice(batch.fake_noise.data());
        let stub = PerfectDenoiser { noise: Tensor::matrix(9, 2, noise).unwrap() };
        let mut g = Graph::new();
        let p = Bound { vars: vec![] };
        let l = mixture_dsm_loss(&mut g, &stub, &p, &batch, true).unwrap();
        assert!(l.value.abs() < 1e-20);
    }

    #[test]
    fn alpha_zero_ignores_real_batch() {
        let n = net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fake = pts(6, 4);
        let b1 = MixtureBatch::sample(pts(6, 5), fake.clone(), 0.0, 0.5, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b2 = MixtureBatch::sample(pts(6, 99), fake, 0.0, 0.5, &mut rng);
        let eval = |b: &MixtureBatch| {
            let mut g = Graph::new();
            let p = n.params().bind(&mut g, false);
            mixture_dsm_loss(&mut g, &n, &p, b, true).unwrap().value
        };
        assert_eq!(eval(&b1), eval(&b2));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let n = net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = MixtureBatch::sample(Tensor::zeros(&[0, 2]), Tensor::zeros(&[0, 2]), 0.5, 0.5, &mut rng);
        let mut g = Graph::new();
        let p = n.params().bind(&mut g, true);
        assert!(mixture_dsm_loss(&mut g, &n, &p, &b, true).is_err());
    }

    #[test]
    fn w_alpha_cases() {
        let n = net(2);
        let x = pts(8, 1);
        let w = adaptive_weight(&n, &x, &x, 1.0, &[0.5]).unwrap();
        assert!(w.w_alpha.iter().all(|&v| v == 1.0));
        let mut flat = net(2);
        flat.zero_alpha_weights();
        for a in [0.1, 0.5, 0.999] {
            let w = adaptive_weight(&flat, &x, &x, a, &[0.5]).unwrap();
            assert!(w.w_alpha.iter().all(|&v| v == 0.0), "{:?}", w.w_alpha);
        }
        assert!(w.w_dmd.iter().all(|&v| v > 0.0 && v.is_finite()));
    }

    #[test]
    fn generator_surrogate_rejects_zero_alpha() {
        let n = net(2);
        let gen = GeneratorNet::for_data(2, &[8], 1).unwrap();
        let mut g = Graph::new();
        let p = gen.params().bind(&mut g, true);
        let z = g.constant(pts(4, 1));
        let x = gen.forward(&mut g, &p, z).unwrap();
        assert!(generator_surrogate(&mut g, &n, x, &pts(4, 2), 0.0, &[0.5], WeightMode::FULL).is_err());
    }

    #[test]
    fn equal_scores_give_zero_generator_gradient() {
        let mut n = net(3);
        n.zero_alpha_weights();
        let gen = GeneratorNet::for_data(2, &[8], 1).unwrap();
        let mut g = Graph::new();
        let p = gen.params().bind(&mut g, true);
        let z = g.constant(pts(4, 1));
        let x = gen.forward(&mut g, &p, z).unwrap();
        let up = generator_surrogate(&mut g, &n, x, &pts(4, 2), 0.3, &[0.5], WeightMode::NONE).unwrap();
        let grads = g.backward(up.surrogate).unwrap();
        for t in gen.params().grads(&p, &grads) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gan_losses_at_zero_logit() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[5, 1]));
        let l = gan_discriminator_loss_from_logits(&mut g, z, z, 0.5).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        for a in [0.1, 0.3, 0.8] {
            let l = gan_discriminator_loss_from_logits(&mut g, z, z, a).unwrap();
            let want = -a * a.ln() - (1.0 - a) * (1.0 - a).ln();
            assert!((g.value(l).item().unwrap() - want).abs() < 1e-14);
            let gl = gan_generator_loss_from_logits(&mut g, z, a).unwrap();
            assert!((g.value(gl).item().unwrap() + a.ln()).abs() < 1e-14);
        }
        let gl = gan_generator_loss_from_logits(&mut g, z, 0.5).unwrap();
        assert!((g.value(gl).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let big = g.constant(Tensor::full(&[3, 1], 60.0));
        let gl = gan_generator_loss_from_logits(&mut g, big, 0.5).unwrap();
        assert!(g.value(gl).item().unwrap() < 1e-25);
    }

    #[test]
    fn sigmoid_offset_recovers_alpha() {
        let d = 1.0 / (1.0 + (-alpha_logit(0.3)).exp());
        assert!((d - 0.3).abs() < 1e-15);
    }
}
