//! Explicit mixture-score parameterization for distillation.
//!
//! The mixture score is assembled from a frozen teacher score `s_p`, a
//! learned fake score `s_fake` and a discriminator logit `l`:
//! `s_exp = D s_p + (1 - D) s_fake` with `D = sigmoid(l + ln(alpha / (1 - alpha)))`.
//! The fake score and the logit share one trunk (an [`AmortizedScoreNet`]
//! built without alpha conditioning).

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{AmortizedScoreNet, Bound, Cond};
use crate::objectives::{
    edm_weight, noisy_on_graph, surrogate_from_direction, w_dmd_from_denoiser, GeneratorUpdate, MixtureBatch, SampleDiag,
    ScoreBatchLoss, WeightMode,
};
use crate::oracles::GaussianMixture;
use crate::schedules::alpha_logit;
use crate::tensor::Tensor;

/// A frozen score model of the target distribution at every noise level.
pub trait Teacher {
    /// `s_p(x_t; sigma)`, `sigma` shared or per row.
    fn score(&self, x_t: &Tensor, sigma: &[f64]) -> Result<Tensor>;

    /// Posterior-mean denoiser `x_t + sigma^2 s_p`.
    fn denoise(&self, x_t: &Tensor, sigma: &[f64]) -> Result<Tensor> {
        let s = self.score(x_t, sigma)?;
        let c = x_t.cols();
        let data = x_t
            .data()
            .iter()
            .zip(s.data())
            .enumerate()
            .map(|(i, (x, s))| {
                let sg = if sigma.len() == 1 { sigma[0] } else { sigma[i / c] };
                x + sg * sg * s
            })
            .collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }

    /// Fingerprint of everything that defines the teacher.
    fn checksum(&self) -> String;
}

impl Teacher for GaussianMixture {
    fn score(&self, x_t: &Tensor, sigma: &[f64]) -> Result<Tensor> {
        if x_t.cols() != self.dim() {
            return Err(Error::Shape(format!("teacher of dim {} got {:?}", self.dim(), x_t.shape())));
        }
        if sigma.len() == 1 {
            return Ok(self.convolve(sigma[0])?.score_batch(x_t));
        }
        if sigma.len() != x_t.rows() {
            return Err(Error::Shape("per-row sigma length".into()));
        }
        let mut out = Vec::with_capacity(x_t.numel());
        for (r, &s) in sigma.iter().enumerate() {
            out.extend(self.convolve(s)?.score(x_t.row(r)));
        }
        Tensor::new(x_t.shape().to_vec(), out)
    }

    fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("mixture serializes");
        format!("{:x}", Sha256::digest(json))
    }
}

/// A denoiser network pretrained by plain score matching, used read-only.
#[derive(Clone, Debug)]
pub struct FrozenScoreNet {
    net: AmortizedScoreNet,
}

impl FrozenScoreNet {
    pub fn new(net: AmortizedScoreNet) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &AmortizedScoreNet {
        &self.net
    }
}

impl Teacher for FrozenScoreNet {
    fn score(&self, x_t: &Tensor, sigma: &[f64]) -> Result<Tensor> {
        self.net.score_values(x_t, &Cond { alpha: vec![0.0], sigma: sigma.to_vec() })
    }

    fn denoise(&self, x_t: &Tensor, sigma: &[f64]) -> Result<Tensor> {
        self.net.denoise_values(x_t, &Cond { alpha: vec![0.0], sigma: sigma.to_vec() })
    }

    fn checksum(&self) -> String {
        self.net.params().checksum()
    }
}

/// `D = sigmoid(logit + ln(alpha / (1 - alpha)))`, alpha clamped.
pub fn explicit_mixture_weight(logit: f64, alpha: f64) -> f64 {
    let u = logit + alpha_logit(alpha);
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Row-wise `D s_p + (1 - D) s_fake`.
pub fn combine_scores(s_p: &Tensor, s_fake: &Tensor, d: &[f64]) -> Result<Tensor> {
    if s_p.shape() != s_fake.shape() || d.len() != s_p.rows() {
        return Err(Error::Shape(format!(
            "combine {:?} / {:?} with {} weights",
            s_p.shape(),
            s_fake.shape(),
            d.len()
        )));
    }
    let c = s_p.cols();
    let data = s_p
        .data()
        .iter()
        .zip(s_fake.data())
        .enumerate()
        .map(|(i, (a, b))| {
            let w = d[i / c];
            w * a + (1.0 - w) * b
        })
        .collect();
    Tensor::new(s_p.shape().to_vec(), data)
}

/// Fake score network plus discriminator head, trained jointly.
#[derive(Clone, Debug)]
pub struct ExplicitScoreBundle {
    pub fake: AmortizedScoreNet,
}

impl ExplicitScoreBundle {
    pub fn new(fake: AmortizedScoreNet) -> Result<Self> {
        if fake.config().alpha_conditioning {
            return Err(Error::contract("fake score network must not be alpha-conditioned"));
        }
        Ok(Self { fake })
    }

    pub fn fake_score_values(&self, x_t: &Tensor, sigma: &[f64]) -> Result<Tensor> {
        self.fake.score_values(x_t, &Cond { alpha: vec![0.0], sigma: sigma.to_vec() })
    }

    pub fn logit_values(&self, x_t: &Tensor, sigma: &[f64]) -> Result<Vec<f64>> {
        Ok(self.fake.logit_values(x_t, sigma)?.into_data())
    }

    /// `D` per row on frozen parameters.
    pub fn weights(&self, x_t: &Tensor, alpha: f64, sigma: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .logit_values(x_t, sigma)?
            .into_iter()
            .map(|l| explicit_mixture_weight(l, alpha))
            .collect())
    }
}

/// `s_exp(x_t; alpha, sigma)` on plain values.
pub fn explicit_mixture_score<T: Teacher + ?Sized>(
    bundle: &ExplicitScoreBundle,
    teacher: &T,
    x_t: &Tensor,
    alpha: f64,
    sigma: &[f64],
) -> Result<Tensor> {
    let s_p = teacher.score(x_t, sigma)?;
    let s_fake = bundle.fake_score_values(x_t, sigma)?;
    let d = bundle.weights(x_t, alpha, sigma)?;
    combine_scores(&s_p, &s_fake, &d)
}

/// Mixture score matching with `s_exp` in place of an amortized network.
///
/// Works in denoiser form, `f_exp = D f_p + (1 - D) f_fake`, which is the
/// same convex combination because the Tweedie map is affine in the score.
/// Gradients reach both the fake score and the discriminator head. At
/// exactly `alpha = 0` (or 1) `D` takes its limiting value 0 (or 1), so the
/// loss reduces to plain score matching of the fake distribution.
pub fn explicit_dsm_loss<T: Teacher + ?Sized>(
    g: &mut Graph,
    bundle: &ExplicitScoreBundle,
    p: &Bound,
    teacher: &T,
    batch: &MixtureBatch,
    edm_weighting: bool,
) -> Result<ScoreBatchLoss> {
    let (clean, noisy) = batch.stacked()?;
    let n = clean.rows();
    let nr = batch.real.rows();
    let expand = |v: &[f64]| if v.len() == 1 { vec![v[0]; n] } else { v.to_vec() };
    let alphas = expand(&batch.cond.alpha);
    let sigmas = expand(&batch.cond.sigma);

    let shared = &batch.cond.sigma;
    let f_p = g.constant(teacher.denoise(&noisy, shared)?);
    let x_t = g.constant(noisy);
    let x = g.constant(clean);
    let f_fake = bundle.fake.denoise(g, p, x_t, &Cond { alpha: vec![0.0], sigma: shared.clone() })?;
    let logits = bundle.fake.logit(g, p, x_t, shared)?;
    let d = mixture_weight_on_graph(g, logits, &alphas)?;

    // f_exp = f_fake + D (f_p - f_fake)
    let gap = g.sub(f_p, f_fake)?;
    let mixed = g.mul(gap, d)?;
    let f_exp = g.add(f_fake, mixed)?;
    let resid = g.sub(f_exp, x)?;
    let sq = g.row_sq_norm(resid)?;
    let sq_vals = g.value(sq).data().to_vec();
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let base = if i < nr { alphas[i] / nr as f64 } else { (1.0 - alphas[i]) / (n - nr) as f64 };
            if edm_weighting {
                base * edm_weight(sigmas[i], bundle.fake.sigma_data())
            } else {
                base
            }
        })
        .collect();
    let w = g.constant(Tensor::column(weights));
    let weighted = g.mul(sq, w)?;
    let loss = g.sum(weighted)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("explicit_dsm_loss"));
    }
    let samples = (0..n)
        .map(|i| SampleDiag { alpha: alphas[i], sigma: sigmas[i], sq_residual: sq_vals[i], real: i < nr })
        .collect();
    Ok(ScoreBatchLoss { loss, value, samples })
}

/// `[n, 1]` column of `D` with the exact endpoint limits at alpha 0 and 1.
fn mixture_weight_on_graph(g: &mut Graph, logits: Var, alphas: &[f64]) -> Result<Var> {
    let offsets = g.constant(Tensor::column(alphas.iter().map(|&a| alpha_logit(a)).collect()));
    let u = g.add(logits, offsets)?;
    let d = g.sigmoid(u)?;
    let keep: Vec<f64> = alphas.iter().map(|&a| if a == 0.0 || a == 1.0 { 0.0 } else { 1.0 }).collect();
    if keep.iter().all(|&k| k == 1.0) {
        return Ok(d);
    }
    let fixed: Vec<f64> = alphas.iter().map(|&a| if a == 1.0 { 1.0 } else { 0.0 }).collect();
    let keep = g.constant(Tensor::column(keep));
    let fixed = g.constant(Tensor::column(fixed));
    let d = g.mul(d, keep)?;
    g.add(d, fixed)
}

/// Generator update `E[D (s_fake - s_p) / alpha]` pulled back through the
/// generator, with an optional `w_dmd` built from the teacher denoiser
/// (`mode.w_alpha` has no meaning here and is ignored).
pub fn explicit_generator_surrogate<T: Teacher + ?Sized>(
    g: &mut Graph,
    bundle: &ExplicitScoreBundle,
    teacher: &T,
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
    let n = xt_val.rows();
    let s_p = teacher.score(&xt_val, sigma)?;
    let s_fake = bundle.fake_score_values(&xt_val, sigma)?;
    let d = bundle.weights(&xt_val, alpha, sigma)?;
    let w_dmd = if mode.w_dmd {
        let f_p = teacher.denoise(&xt_val, sigma)?;
        w_dmd_from_denoiser(g.value(x), &f_p, sigma, mode.eps)
    } else {
        vec![1.0; n]
    };
    let c = xt_val.cols();
    let direction: Vec<f64> = s_fake
        .data()
        .iter()
        .zip(s_p.data())
        .enumerate()
        .map(|(i, (f, p))| w_dmd[i / c] * d[i / c] * (f - p) / alpha)
        .collect();
    let direction = Tensor::matrix(n, c, direction)?;
    let gap = (0..n)
        .map(|r| d[r] * s_fake.row(r).iter().zip(s_p.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64;
    let surrogate = surrogate_from_direction(g, x_t, direction)?;
    Ok(GeneratorUpdate {
        surrogate,
        x_t,
        mean_score_gap: gap,
        mean_w_alpha: 1.0,
        mean_w_dmd: w_dmd.iter().sum::<f64>() / n as f64,
    })
}

/// `alpha sum_k r_k (1 - D_k)^2 + (1 - alpha) sum_k f_k D_k^2` for
/// explicit real/fake weights over a shared support.
pub fn lecam_weighted(d: &[f64], real_w: &[f64], fake_w: &[f64], alpha: f64) -> Result<f64> {
    if d.len() != real_w.len() || d.len() != fake_w.len() {
        return Err(Error::Shape("lecam weights must match D values".into()));
    }
    Ok(d.iter()
        .zip(real_w.iter().zip(fake_w))
        .map(|(&d, (&r, &f))| alpha * r * (1.0 - d).powi(2) + (1.0 - alpha) * f * d * d)
        .sum())
}

/// `alpha E_p[(1 - D)^2] + (1 - alpha) E_q[D^2]` from sample values.
pub fn lecam_reduced_objective(d_real: &[f64], d_fake: &[f64], alpha: f64) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::contract("empty D batch"));
    }
    if d_real.iter().chain(d_fake).any(|d| !(0.0..=1.0).contains(d)) {
        return Err(Error::contract("D values must lie in [0, 1]"));
    }
    let er = d_real.iter().map(|d| (1.0 - d).powi(2)).sum::<f64>() / d_real.len() as f64;
    let ef = d_fake.iter().map(|d| d * d).sum::<f64>() / d_fake.len() as f64;
    Ok(alpha * er + (1.0 - alpha) * ef)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{GeneratorNet, ScoreNetConfig};
    use crate::objectives::gaussian_noise;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(seed: u64) -> ExplicitScoreBundle {
        let mut c = ScoreNetConfig::new(1, 1.0, seed);
        c.hidden_dims = vec![16, 16];
        c.noise_embedding_dim = 8;
        c.disc_hidden = 8;
        c.alpha_conditioning = false;
        ExplicitScoreBundle::new(AmortizedScoreNet::new(c).unwrap()).unwrap()
    }

    #[test]
    fn weight_trivial_values() {
        for a in [0.01, 0.3, 0.5, 0.9] {
            assert!((explicit_mixture_weight(0.0, a) - a).abs() < 1e-15);
        }
        let l: f64 = 1.3;
        assert!((explicit_mixture_weight(l, 0.5) - 1.0 / (1.0 + (-l).exp())).abs() < 1e-16);
        assert!(explicit_mixture_weight(-800.0, 0.5) >= 0.0);
        assert!(explicit_mixture_weight(800.0, 0.5) <= 1.0);
        assert!(explicit_mixture_weight(50.0, 1.0) > 1.0 - 1e-15);
    }

    #[test]
    fn identical_mixands_ignore_weight() {
        let s = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let out = combine_scores(&s, &s, &[0.1, 0.7, 1.0]).unwrap();
        assert!(out.max_abs_diff(&s) < 1e-15);
    }

    #[test]
    fn alpha_conditioned_fake_net_rejected() {
        let c = ScoreNetConfig::new(1, 1.0, 0);
        assert!(ExplicitScoreBundle::new(AmortizedScoreNet::new(c).unwrap()).is_err());
    }

    #[test]
    fn lecam_trivial_values() {
        for a in [0.2, 0.5, 0.7] {
            let v = lecam_reduced_objective(&[a; 4], &[a; 3], a).unwrap();
            assert!((v - a * (1.0 - a)).abs() < 1e-15);
            let v = lecam_reduced_objective(&[1.0; 4], &[1.0; 3], a).unwrap();
            assert!((v - (1.0 - a)).abs() < 1e-15);
        }
        assert!(lecam_reduced_objective(&[1.5], &[0.0], 0.5).is_err());
    }

    #[test]
    fn alpha_zero_is_plain_fake_dsm() {
        let b = bundle(1);
        let teacher = GaussianMixture::gaussian(vec![2.0], 1.0).unwrap();
        let other = GaussianMixture::gaussian(vec![-5.0], 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = MixtureBatch::sample(gaussian_noise(&mut rng, 6, 1), gaussian_noise(&mut rng, 6, 1), 0.0, 0.4, &mut rng);
        let eval = |t: &GaussianMixture| {
            let mut g = Graph::new();
            let p = b.fake.params().bind(&mut g, false);
            explicit_dsm_loss(&mut g, &b, &p, t, &batch, true).unwrap().value
        };
        assert_eq!(eval(&teacher), eval(&other));
    }

    #[test]
    fn very_negative_logit_kills_generator_gradient() {
        let mut b = bundle(2);
        let i = b.fake.params().index_of("disc.1.b").unwrap();
        b.fake.params_mut().get_mut(i).data_mut()[0] = -800.0;
        let teacher = GaussianMixture::gaussian(vec![2.0], 1.0).unwrap();
        let gen = GeneratorNet::for_data(1, &[8], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let p = gen.params().bind(&mut g, true);
        let z = g.constant(gaussian_noise(&mut rng, 5, 1));
        let x = gen.forward(&mut g, &p, z).unwrap();
        let eps = gaussian_noise(&mut rng, 5, 1);
        let up = explicit_generator_surrogate(&mut g, &b, &teacher, x, &eps, 0.5, &[0.5], WeightMode::NONE).unwrap();
        let grads = g.backward(up.surrogate).unwrap();
        for t in gen.params().grads(&p, &grads) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn frozen_net_teacher_checksum_is_stable() {
        let t = FrozenScoreNet::new(bundle(4).fake);
        let x = Tensor::column(vec![0.1, -0.3]);
        let before = t.checksum();
        t.score(&x, &[0.5]).unwrap();
        assert_eq!(before, t.checksum());
        let gm = GaussianMixture::gaussian(vec![0.0], 1.0).unwrap();
        assert_eq!(gm.checksum(), gm.clone().checksum());
    }

    #[test]
    fn analytic_teacher_denoiser_is_posterior_mean() {
        let gm = GaussianMixture::new(vec![0.3, 0.7], vec![vec![-1.0], vec![2.0]], vec![0.2, 0.5]).unwrap();
        let x = Tensor::column(vec![-0.4, 0.9, 3.0]);
        let f = gm.denoise(&x, &[0.6]).unwrap();
        for r in 0..3 {
            let want = crate::oracles::posterior_mean_oracle(&gm, x.row(r), 0.6).unwrap();
            assert!((f.row(r)[0] - want[0]).abs() < 1e-10);
        }
    }
}
