//! Self-checks against analytic ground truth. Each check returns the
//! worst measured error next to its tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::distill::{
    combine_scores, explicit_dsm_loss, explicit_generator_surrogate, explicit_mixture_weight, lecam_weighted,
    ExplicitScoreBundle, Teacher,
};
use crate::error::Result;
use crate::nets::{Activation, AmortizedScoreNet, Cond, GeneratorNet, MlpSpec, ScoreNetConfig};
use crate::objectives::{
    gan_discriminator_loss, gan_generator_loss, gaussian_noise, generator_surrogate, mixture_dsm_loss,
    w_alpha_from_scores, w_dmd_from_denoiser, weighted_direction, GeneratorScores, MixtureBatch, WeightMode,
};
use crate::oracles::{finite_diff_grad, mixture_score_oracle, posterior_mean_oracle, GaussianMixture};
use crate::tensor::Tensor;
use crate::trainer::{Mode, TrainConfig, Trainer};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Worst error observed.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    pub fn new(name: &'static str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self { name, passed: measured.is_finite() && measured <= tolerance, measured, tolerance, detail: detail.into() }
    }

    pub fn failed(name: &'static str, tolerance: f64, err: crate::Error) -> Self {
        Self { name, passed: false, measured: f64::NAN, tolerance, detail: format!("error: {err}") }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: max err {:.3e} (tol {:.0e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(1e-12)
}

/// Random isotropic mixture with `k` components in `d` dimensions.
pub fn random_mixture(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GaussianMixture {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let head: f64 = weights[..k - 1].iter().sum();
    weights[k - 1] = 1.0 - head;
    let means = (0..k).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let variances = (0..k).map(|_| rng.random_range(0.2..1.5)).collect();
    GaussianMixture::new(weights, means, variances).expect("valid random mixture")
}

fn random_point(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    gaussian_noise(rng, 1, d).into_data().into_iter().map(|v| v * scale).collect()
}

/// Teacher/fake scores combined with the exact log density ratio against
/// the pooled mixture score.
pub fn explicit_score_exactness(seed: u64) -> Check {
    const NAME: &str = "explicit mixture score, exact log-ratio";
    let run = || -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let p = random_mixture(&mut rng, 3, 2);
            let q = random_mixture(&mut rng, 2, 2);
            let alpha = rng.random_range(0.01..0.99);
            let sigma = rng.random_range(0.05..2.0);
            let (ps, qs) = (p.convolve(sigma)?, q.convolve(sigma)?);
            let x = random_point(&mut rng, 2, 2.0);
            let logit = ps.log_density(&x) - qs.log_density(&x);
            let d = explicit_mixture_weight(logit, alpha);
            let xt = Tensor::matrix(1, 2, x.clone())?;
            let s = combine_scores(&ps.score_batch(&xt), &qs.score_batch(&xt), &[d])?;
            worst = worst.max(rel_err(s.data(), &mixture_score_oracle(&ps, &qs, alpha, &x)?));
        }
        Ok(worst)
    };
    match run() {
        Ok(e) => Check::new(NAME, e, 1e-10, "100 random (x, alpha, sigma)"),
        Err(err) => Check::failed(NAME, 1e-10, err),
    }
}

/// Mixture score oracle against central differences of the log density
/// of `alpha p + (1 - alpha) q`.
pub fn mixture_score_finite_difference(seed: u64) -> Check {
    const NAME: &str = "mixture score vs finite differences";
    let run = || -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_mixture(&mut rng, 3, 2);
        let q = random_mixture(&mut rng, 2, 2);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let x = random_point(&mut rng, 2, 1.5);
            for alpha in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
                let log_m = |y: &[f64]| -> Result<f64> {
                    let lp = p.log_density(y) + if alpha > 0.0 { alpha.ln() } else { f64::NEG_INFINITY };
                    let lq = q.log_density(y) + if alpha < 1.0 { (1.0 - alpha).ln() } else { f64::NEG_INFINITY };
                    let m = lp.max(lq);
                    Ok(m + ((lp - m).exp() + (lq - m).exp()).ln())
                };
                let fd = finite_diff_grad(log_m, &x, 1e-5)?;
                worst = worst.max(rel_err(&mixture_score_oracle(&p, &q, alpha, &x)?, &fd));
            }
        }
        Ok(worst)
    };
    match run() {
        Ok(e) => Check::new(NAME, e, 1e-6, "50 points x 5 alphas"),
        Err(err) => Check::failed(NAME, 1e-6, err),
    }
}

/// Conjugate posterior mean against `x_t + sigma^2` times the convolved
/// mixture score.
pub fn tweedie_posterior_mean(seed: u64) -> Check {
    const NAME: &str = "Tweedie posterior mean";
    let run = || -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let p = random_mixture(&mut rng, 3, 2);
            let q = random_mixture(&mut rng, 2, 2);
            let alpha = rng.random_range(0.0..1.0);
            let sigma = rng.random_range(0.05..3.0);
            let m = GaussianMixture::mix(&p, &q, alpha)?;
            let xt = random_point(&mut rng, 2, 2.5);
            let post = posterior_mean_oracle(&m, &xt, sigma)?;
            let s = m.convolve(sigma)?.score(&xt);
            let err = (0..2).map(|i| (post[i] - (xt[i] + sigma * sigma * s[i])).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
        Ok(worst)
    };
    match run() {
        Ok(e) => Check::new(NAME, e, 1e-10, "100 random (x_t, sigma, alpha), absolute"),
        Err(err) => Check::failed(NAME, 1e-10, err),
    }
}

/// Weighted quantile of `(value, weight)` pairs.
fn weighted_quantile(pairs: &mut [(f64, f64)], q: f64) -> f64 {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for &(v, w) in pairs.iter() {
        acc += w;
        if acc >= q * total {
            return v;
        }
    }
    pairs.last().map_or(0.0, |p| p.0)
}

/// Solves a symmetric tridiagonal system (Thomas algorithm).
fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = if n > 1 { off[0] / diag[0] } else { 0.0 };
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - off[i - 1] * c[i - 1];
        if i + 1 < n {
            c[i] = off[i] / m;
        }
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Empirical mixture score matching over a piecewise-linear table of
/// score values in one dimension. Returns the density-weighted L2 error
/// against the analytic noisy mixture score over the central 99% mass.
pub fn tabulated_score_l2(p: &GaussianMixture, q: &GaussianMixture, alpha: f64, sigma: f64, n: usize, knots: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n / 2;
    let xp = p.sample(half, &mut rng);
    let xq = q.sample(half, &mut rng);
    // (x_t, target -eps / sigma, weight)
    let mut rows = Vec::with_capacity(2 * half);
    for (x, w) in [(&xp, alpha / half as f64), (&xq, (1.0 - alpha) / half as f64)] {
        let eps = gaussian_noise(&mut rng, half, 1);
        for i in 0..half {
            let e = eps.data()[i];
            rows.push((x.data()[i] + sigma * e, -e / sigma, w));
        }
    }
    let mut pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, r.2)).collect();
    let lo = weighted_quantile(&mut pairs, 0.005);
    let hi = weighted_quantile(&mut pairs, 0.995);
    let h = (hi - lo) / (knots - 1) as f64;
    let hat = |x: f64| -> (usize, f64) {
        let u = ((x - lo) / h).clamp(0.0, (knots - 1) as f64);
        let j = (u.floor() as usize).min(knots - 2);
        (j, u - j as f64)
    };
    let mut diag = vec![0.0; knots];
    let mut off = vec![0.0; knots - 1];
    let mut rhs = vec![0.0; knots];
    for &(x, y, w) in rows.iter().filter(|r| r.0 >= lo && r.0 <= hi) {
        let (j, t) = hat(x);
        let (a, b) = (1.0 - t, t);
        diag[j] += w * a * a;
        diag[j + 1] += w * b * b;
        off[j] += w * a * b;
        rhs[j] += w * a * y;
        rhs[j + 1] += w * b * y;
    }
    let table = solve_tridiagonal(&diag, &off, &rhs);
    let (ps, qs) = (p.convolve(sigma)?, q.convolve(sigma)?);
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, _, w) in rows.iter().filter(|r| r.0 >= lo && r.0 <= hi) {
        let (j, t) = hat(x);
        let fit = (1.0 - t) * table[j] + t * table[j + 1];
        let truth = mixture_score_oracle(&ps, &qs, alpha, &[x])?[0];
        num += w * (fit - truth).powi(2);
        den += w;
    }
    Ok((num / den).sqrt())
}

pub fn tabulated_score_matching(seed: u64) -> Check {
    const NAME: &str = "tabulated 1-D mixture score matching";
    let run = || -> Result<(f64, String)> {
        let p = GaussianMixture::new(vec![0.4, 0.6], vec![vec![-2.0], vec![0.5]], vec![0.3, 0.5])?;
        let q = GaussianMixture::gaussian(vec![1.0], 1.2)?;
        let mut worst: f64 = 0.0;
        let mut detail = Vec::new();
        for (i, alpha) in [0.1, 0.5, 0.9].into_iter().enumerate() {
            let e = tabulated_score_l2(&p, &q, alpha, 0.5, 1_000_000, 64, seed + i as u64)?;
            detail.push(format!("alpha {alpha}: {e:.2e}"));
            worst = worst.max(e);
        }
        Ok((worst, detail.join(", ")))
    };
    match run() {
        Ok((e, d)) => Check::new(NAME, e, 5e-2, format!("1e6 samples, sigma 0.5; {d}")),
        Err(err) => Check::failed(NAME, 5e-2, err),
    }
}

fn small_score_net(alpha_conditioning: bool, seed: u64) -> Result<AmortizedScoreNet> {
    let mut c = ScoreNetConfig::new(2, 1.0, seed);
    c.hidden_dims = vec![8, 8];
    c.alpha_embedding_dim = 4;
    c.noise_embedding_dim = 4;
    c.disc_hidden = 4;
    c.fourier_scale = 1.0;
    c.alpha_conditioning = alpha_conditioning;
    let mut net = AmortizedScoreNet::new(c)?;
    // move every parameter off its initial value so no block is trivially zero
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let flat: Vec<f64> = net.params().flatten();
    let noise = gaussian_noise(&mut rng, 1, flat.len());
    let moved: Vec<f64> = flat.iter().zip(noise.data()).map(|(a, b)| a + 0.3 * b).collect();
    net.params_mut().set_flat(&moved)?;
    Ok(net)
}

fn smooth_generator(seed: u64) -> Result<GeneratorNet> {
    GeneratorNet::new(MlpSpec { input_dim: 2, hidden_dims: vec![8], output_dim: 2, activation: Activation::Silu, seed })
}

fn with_flat_score(net: &AmortizedScoreNet, flat: &[f64]) -> Result<AmortizedScoreNet> {
    let mut n = net.clone();
    n.params_mut().set_flat(flat)?;
    Ok(n)
}

fn with_flat_gen(net: &GeneratorNet, flat: &[f64]) -> Result<GeneratorNet> {
    let mut n = net.clone();
    n.params_mut().set_flat(flat)?;
    Ok(n)
}

fn flat_grads(grads: &[Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Inputs shared by the gradient checks for one seed.
struct GradCase {
    rng: ChaCha8Rng,
    net: AmortizedScoreNet,
    fake_net: AmortizedScoreNet,
    gen: GeneratorNet,
    teacher: GaussianMixture,
    z: Tensor,
    eps: Tensor,
    alpha: f64,
    sigma: Vec<f64>,
}

impl GradCase {
    fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let z = gaussian_noise(&mut rng, n, 2);
        let eps = gaussian_noise(&mut rng, n, 2);
        let alpha = rng.random_range(0.05..0.95);
        let sigma = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let teacher = random_mixture(&mut rng, 2, 2);
        Ok(Self {
            net: small_score_net(true, seed)?,
            fake_net: small_score_net(false, seed + 1)?,
            gen: smooth_generator(seed + 2)?,
            rng,
            teacher,
            z,
            eps,
            alpha,
            sigma,
        })
    }

    fn batch(&mut self) -> MixtureBatch {
        let real = gaussian_noise(&mut self.rng, 5, 2);
        let fake = gaussian_noise(&mut self.rng, 4, 2).map(|v| 0.7 * v + 0.3);
        let mut b = MixtureBatch::sample(real, fake, self.alpha, 1.0, &mut self.rng);
        b.cond.sigma = (0..9).map(|_| self.rng.random_range(0.1..2.0)).collect();
        b
    }
}

/// Autodiff gradient and central-difference gradient of one loss.
type GradPair = (Vec<f64>, Vec<f64>);

fn dsm_grads(c: &mut GradCase) -> Result<GradPair> {
    let batch = c.batch();
    let value = |net: &AmortizedScoreNet| -> Result<f64> {
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, false);
        Ok(mixture_dsm_loss(&mut g, net, &p, &batch, true)?.value)
    };
    let mut g = Graph::new();
    let p = c.net.params().bind(&mut g, true);
    let l = mixture_dsm_loss(&mut g, &c.net, &p, &batch, true)?;
    let ad = flat_grads(&c.net.params().grads(&p, &g.backward(l.loss)?));
    let fd = finite_diff_grad(|f| value(&with_flat_score(&c.net, f)?), &c.net.params().flatten(), 1e-4)?;
    Ok((ad, fd))
}

fn explicit_dsm_grads(c: &mut GradCase) -> Result<GradPair> {
    let batch = c.batch();
    let teacher = c.teacher.clone();
    let value = |net: &AmortizedScoreNet| -> Result<f64> {
        let bundle = ExplicitScoreBundle::new(net.clone())?;
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, false);
        Ok(explicit_dsm_loss(&mut g, &bundle, &p, &teacher, &batch, true)?.value)
    };
    let bundle = ExplicitScoreBundle::new(c.fake_net.clone())?;
    let mut g = Graph::new();
    let p = c.fake_net.params().bind(&mut g, true);
    let l = explicit_dsm_loss(&mut g, &bundle, &p, &teacher, &batch, true)?;
    let ad = flat_grads(&c.fake_net.params().grads(&p, &g.backward(l.loss)?));
    let fd = finite_diff_grad(|f| value(&with_flat_score(&c.fake_net, f)?), &c.fake_net.params().flatten(), 1e-4)?;
    Ok((ad, fd))
}

/// `mean_i <direction_i, g(z_i) + sigma_i eps_i>` with `direction` fixed.
fn frozen_surrogate(gen: &GeneratorNet, z: &Tensor, eps: &Tensor, sigma: &[f64], direction: &Tensor) -> Result<f64> {
    let x = gen.sample(z)?;
    let n = x.rows();
    let c = x.cols();
    let mut s = 0.0;
    for (i, (xv, e)) in x.data().iter().zip(eps.data()).enumerate() {
        s += direction.data()[i] * (xv + sigma[i / c] * e);
    }
    Ok(s / n as f64)
}

fn generator_surrogate_grads(c: &mut GradCase) -> Result<GradPair> {
    let mut g = Graph::new();
    let gp = c.gen.params().bind(&mut g, true);
    let zv = g.constant(c.z.clone());
    let x = c.gen.forward(&mut g, &gp, zv)?;
    let up = generator_surrogate(&mut g, &c.net, x, &c.eps, c.alpha, &c.sigma, WeightMode::FULL)?;
    let surrogate = g.value(up.surrogate).item()?;
    let ad = flat_grads(&c.gen.params().grads(&gp, &g.backward(up.surrogate)?));

    let x_val = g.value(x).clone();
    let xt = g.value(up.x_t).clone();
    let s = GeneratorScores::evaluate(&c.net, &xt, c.alpha, &c.sigma)?;
    let wa = w_alpha_from_scores(&s.s0, &s.s_alpha, &s.s1, c.alpha, WeightMode::FULL.eps);
    let wd = w_dmd_from_denoiser(&x_val, &s.f0, &c.sigma, WeightMode::FULL.eps);
    let w: Vec<f64> = wa.iter().zip(&wd).map(|(a, b)| a * b).collect();
    let direction = weighted_direction(&s.s0, &s.s_alpha, &w, c.alpha)?;
    let replay = frozen_surrogate(&c.gen, &c.z, &c.eps, &c.sigma, &direction)?;
    if (replay - surrogate).abs() > 1e-10 * surrogate.abs().max(1.0) {
        return Err(crate::Error::Contract(format!("direction replay mismatch: {replay} vs {surrogate}")));
    }
    let fd = finite_diff_grad(
        |f| frozen_surrogate(&with_flat_gen(&c.gen, f)?, &c.z, &c.eps, &c.sigma, &direction),
        &c.gen.params().flatten(),
        1e-4,
    )?;
    Ok((ad, fd))
}

fn explicit_generator_grads(c: &mut GradCase) -> Result<GradPair> {
    let bundle = ExplicitScoreBundle::new(c.fake_net.clone())?;
    let mode = WeightMode { w_alpha: false, w_dmd: true, eps: 1e-8 };
    let mut g = Graph::new();
    let gp = c.gen.params().bind(&mut g, true);
    let zv = g.constant(c.z.clone());
    let x = c.gen.forward(&mut g, &gp, zv)?;
    let up = explicit_generator_surrogate(&mut g, &bundle, &c.teacher, x, &c.eps, c.alpha, &c.sigma, mode)?;
    let surrogate = g.value(up.surrogate).item()?;
    let ad = flat_grads(&c.gen.params().grads(&gp, &g.backward(up.surrogate)?));

    let x_val = g.value(x).clone();
    let xt = g.value(up.x_t).clone();
    let s_p = Teacher::score(&c.teacher, &xt, &c.sigma)?;
    let s_fake = bundle.fake_score_values(&xt, &c.sigma)?;
    let d = bundle.weights(&xt, c.alpha, &c.sigma)?;
    let wd = w_dmd_from_denoiser(&x_val, &c.teacher.denoise(&xt, &c.sigma)?, &c.sigma, mode.eps);
    let cols = xt.cols();
    let dir: Vec<f64> = (0..xt.numel())
        .map(|i| wd[i / cols] * d[i / cols] * (s_fake.data()[i] - s_p.data()[i]) / c.alpha)
        .collect();
    let direction = Tensor::new(xt.shape().to_vec(), dir)?;
    let replay = frozen_surrogate(&c.gen, &c.z, &c.eps, &c.sigma, &direction)?;
    if (replay - surrogate).abs() > 1e-10 * surrogate.abs().max(1.0) {
        return Err(crate::Error::Contract(format!("direction replay mismatch: {replay} vs {surrogate}")));
    }
    let fd = finite_diff_grad(
        |f| frozen_surrogate(&with_flat_gen(&c.gen, f)?, &c.z, &c.eps, &c.sigma, &direction),
        &c.gen.params().flatten(),
        1e-4,
    )?;
    Ok((ad, fd))
}

fn gan_generator_grads(c: &mut GradCase) -> Result<GradPair> {
    let value = |gen: &GeneratorNet, track: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let gp = gen.params().bind(&mut g, track);
        let zv = g.constant(c.z.clone());
        let x = gen.forward(&mut g, &gp, zv)?;
        let noise = g.constant(crate::objectives::add_noise(&Tensor::zeros(c.eps.shape()), &c.eps, &c.sigma)?);
        let x_t = g.add(x, noise)?;
        let sp = c.net.params().bind(&mut g, false);
        let loss = gan_generator_loss(&mut g, &c.net, &sp, x_t, c.alpha, &c.sigma)?;
        let v = g.value(loss).item()?;
        let grads = if track { Some(flat_grads(&gen.params().grads(&gp, &g.backward(loss)?))) } else { None };
        Ok((v, grads))
    };
    let ad = value(&c.gen, true)?.1.expect("tracked");
    let fd = finite_diff_grad(|f| Ok(value(&with_flat_gen(&c.gen, f)?, false)?.0), &c.gen.params().flatten(), 1e-4)?;
    Ok((ad, fd))
}

fn gan_discriminator_grads(c: &mut GradCase) -> Result<GradPair> {
    let real = gaussian_noise(&mut c.rng, 5, 2);
    let fake = gaussian_noise(&mut c.rng, 4, 2).map(|v| v + 0.5);
    let sigma: Vec<f64> = (0..9).map(|_| c.rng.random_range(0.1..2.0)).collect();
    let alpha = c.alpha;
    let value = |net: &AmortizedScoreNet, track: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, track);
        let loss = gan_discriminator_loss(&mut g, net, &p, &real, &fake, alpha, &sigma)?;
        let v = g.value(loss).item()?;
        let grads = if track { Some(flat_grads(&net.params().grads(&p, &g.backward(loss)?))) } else { None };
        Ok((v, grads))
    };
    let ad = value(&c.net, true)?.1.expect("tracked");
    let fd = finite_diff_grad(|f| Ok(value(&with_flat_score(&c.net, f)?, false)?.0), &c.net.params().flatten(), 1e-4)?;
    Ok((ad, fd))
}

/// Names and gradient routines of every differentiated loss.
fn gradient_cases() -> Vec<(&'static str, fn(&mut GradCase) -> Result<GradPair>)> {
    vec![
        ("mixture_dsm_loss", dsm_grads),
        ("generator_surrogate", generator_surrogate_grads),
        ("explicit_dsm_loss", explicit_dsm_grads),
        ("explicit_generator_surrogate", explicit_generator_grads),
        ("gan_generator_loss", gan_generator_grads),
        ("gan_discriminator_loss", gan_discriminator_grads),
    ]
}

pub fn loss_gradients(seeds: u64) -> Check {
    const NAME: &str = "loss gradients vs central differences";
    let run = || -> Result<(f64, String)> {
        let mut worst: f64 = 0.0;
        let mut per_loss = Vec::new();
        for (name, f) in gradient_cases() {
            let mut loss_worst: f64 = 0.0;
            for seed in 0..seeds {
                let mut case = GradCase::new(1000 + seed)?;
                let (ad, fd) = f(&mut case)?;
                loss_worst = loss_worst.max(rel_err(&ad, &fd));
            }
            per_loss.push(format!("{name} {loss_worst:.1e}"));
            worst = worst.max(loss_worst);
        }
        Ok((worst, format!("{seeds} seeds each; {}", per_loss.join(", "))))
    };
    match run() {
        Ok((e, d)) => Check::new(NAME, e, 1e-5, d),
        Err(err) => Check::failed(NAME, 1e-5, err),
    }
}

/// At alpha = 1 with unit weights the generator gradient must equal the
/// classic reverse-KL update `E[(s_fake - s_real) dx/dtheta]`, written
/// here as a regression onto a detached target.
pub fn alpha_one_reduction(seed: u64) -> Check {
    const NAME: &str = "alpha = 1 update equals reverse-KL update";
    let run = || -> Result<f64> {
        let mut worst: f64 = 0.0;
        for s in 0..10 {
            let c = GradCase::new(seed + s)?;
            let mut g = Graph::new();
            let gp = c.gen.params().bind(&mut g, true);
            let zv = g.constant(c.z.clone());
            let x = c.gen.forward(&mut g, &gp, zv)?;
            let up = generator_surrogate(&mut g, &c.net, x, &c.eps, 1.0, &c.sigma, WeightMode::NONE)?;
            let ours = flat_grads(&c.gen.params().grads(&gp, &g.backward(up.surrogate)?));

            let mut h = Graph::new();
            let hp = c.gen.params().bind(&mut h, true);
            let zv = h.constant(c.z.clone());
            let x = c.gen.forward(&mut h, &hp, zv)?;
            let xv = h.value(x).clone();
            let xt = crate::objectives::add_noise(&xv, &c.eps, &c.sigma)?;
            let at = |a: f64| Cond { alpha: vec![a], sigma: c.sigma.clone() };
            let s_fake = c.net.score_values(&xt, &at(0.0))?;
            let s_real = c.net.score_values(&xt, &at(1.0))?;
            let target: Vec<f64> =
                (0..xv.numel()).map(|i| xv.data()[i] - (s_fake.data()[i] - s_real.data()[i])).collect();
            let target = h.constant(Tensor::new(xv.shape().to_vec(), target)?);
            let diff = h.sub(x, target)?;
            let sq = h.square(diff)?;
            let total = h.sum(sq)?;
            let loss = h.mul_scalar(total, 0.5 / xv.rows() as f64)?;
            let dmd = flat_grads(&c.gen.params().grads(&hp, &h.backward(loss)?));
            let scale = dmd.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let err = ours.iter().zip(&dmd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            worst = worst.max(err);
        }
        Ok(worst)
    };
    match run() {
        Ok(e) => Check::new(NAME, e, 1e-12, "10 random generators/score nets"),
        Err(err) => Check::failed(NAME, 1e-12, err),
    }
}

/// On a finite support with densities `p_k, q_k` and score gap weights
/// `w_k = |s_p - s_q|^2`, the explicit score matching error
/// `sum_k m_k |s_exp - s_mix|^2` equals the weighted Le Cam objective plus
/// a term free of `D`.
pub fn lecam_identity(seed: u64) -> Check {
    const NAME: &str = "explicit score error equals weighted Le Cam objective";
    let run = || -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let k = 50;
            let alpha = rng.random_range(0.01..0.99);
            let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let q: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let d: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let s_p = gaussian_noise(&mut rng, k, 2);
            let s_q = gaussian_noise(&mut rng, k, 2);
            let s_exp = combine_scores(&s_p, &s_q, &d)?;
            let mut lhs = 0.0;
            let mut constant = 0.0;
            let mut w = Vec::with_capacity(k);
            for i in 0..k {
                let m = alpha * p[i] + (1.0 - alpha) * q[i];
                let d_star = alpha * p[i] / m;
                let gap2: f64 = s_p.row(i).iter().zip(s_q.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                let err2: f64 = (0..2)
                    .map(|j| {
                        let mix = d_star * s_p.get2(i, j) + (1.0 - d_star) * s_q.get2(i, j);
                        (s_exp.get2(i, j) - mix).powi(2)
                    })
                    .sum();
                lhs += m * err2;
                constant += gap2 * ((alpha * p[i]).powi(2) / m - alpha * p[i]);
                w.push(gap2);
            }
            let real_w: Vec<f64> = (0..k).map(|i| p[i] * w[i]).collect();
            let fake_w: Vec<f64> = (0..k).map(|i| q[i] * w[i]).collect();
            let rhs = lecam_weighted(&d, &real_w, &fake_w, alpha)? + constant;
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        }
        Ok(worst)
    };
    match run() {
        Ok(e) => Check::new(NAME, e, 1e-12, "100 random supports of 50 points"),
        Err(err) => Check::failed(NAME, 1e-12, err),
    }
}

/// Small but complete training configuration used by the resume check.
pub fn tiny_config(mode: Mode, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.run.mode = mode;
    c.run.seed = seed;
    c.run.total_steps = 100;
    c.schedule.batch_size = 32;
    c.schedule.score_subiters = 2;
    c.schedule.warmup_steps = 20;
    c.model.gen_hidden = vec![16, 16];
    c.model.score_hidden = vec![16, 16];
    c.model.alpha_embedding_dim = 8;
    c.model.noise_embedding_dim = 8;
    c.model.disc_hidden = 8;
    c.data.spec = crate::data::DatasetSpec::SwissRoll { n: 2000, noise_std: crate::data::SWISS_ROLL_NOISE, seed };
    c
}

/// A 100-step run against 50 steps, a save/load round trip through a
/// checkpoint file, and 50 more steps.
pub fn resume_determinism(seed: u64) -> Check {
    const NAME: &str = "checkpoint resume is bit-exact";
    let run = || -> Result<(f64, String)> {
        let config = tiny_config(Mode::Smt, seed);
        let mut straight = Trainer::new(config.clone())?;
        straight.run(100, |_| {})?;
        let mut first = Trainer::new(config)?;
        first.run(50, |_| {})?;
        let path = std::env::temp_dir().join(format!("smix-resume-{}-{seed}.somx", std::process::id()));
        first.save_checkpoint(&path)?;
        let mut resumed = Trainer::load_checkpoint(&path)?;
        let _ = std::fs::remove_file(&path);
        resumed.run(50, |_| {})?;
        let a = straight.checkpoint_bytes()?;
        let b = resumed.checkpoint_bytes()?;
        let ga = straight.generator.params().flatten();
        let gb = resumed.generator.params().flatten();
        let max_diff = ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let differs: f64 = if a == b { 0.0 } else { 1.0 };
        Ok((differs.max(max_diff), format!("state bytes equal: {}, steps {} / {}", a == b, straight.step, resumed.step)))
    };
    match run() {
        Ok((e, d)) => Check::new(NAME, e, 0.0, d),
        Err(err) => Check::failed(NAME, 0.0, err),
    }
}

/// Every fast check, in a fixed order.
pub fn run_all() -> Vec<Check> {
    vec![
        explicit_score_exactness(1),
        mixture_score_finite_difference(2),
        tweedie_posterior_mean(3),
        tabulated_score_matching(4),
        loss_gradients(10),
        alpha_one_reduction(6),
        lecam_identity(7),
        resume_determinism(8),
    ]
}
