//! Analytic ground truth used to verify training code: isotropic Gaussian
//! mixtures with closed-form densities, scores, convolutions and posterior
//! means, plus a central finite-difference gradient.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mixture of isotropic Gaussians `sum_k w_k N(mu_k, v_k I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;

    fn try_from(r: RawMixture) -> Result<Self> {
        Self::new(r.weights, r.means, r.variances)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(Error::Config("mixture needs matching non-empty weights, means, variances".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config(format!("mixture weights must be >= 0 and sum to 1, got {total}")));
        }
        if variances.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Config("mixture variances must be positive".into()));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::Config("mixture means must share a non-zero dimension".into()));
        }
        // zero-weight components carry no mass; dropping them keeps log-weights finite
        let keep: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] > 0.0).collect();
        Ok(Self {
            weights: keep.iter().map(|&k| weights[k]).collect(),
            means: keep.iter().map(|&k| means[k].clone()).collect(),
            variances: keep.iter().map(|&k| variances[k]).collect(),
        })
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        (0..self.n_components())
            .map(|k| {
                let v = self.variances[k];
                let sq: f64 = x.iter().zip(&self.means[k]).map(|(a, m)| (a - m) * (a - m)).sum();
                self.weights[k].ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - sq / (2.0 * v)
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(x))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let logs = self.component_log_densities(x);
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    /// `grad_x log p(x) = sum_k r_k(x) (mu_k - x) / v_k`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let mut s = vec![0.0; x.len()];
        for k in 0..self.n_components() {
            for (i, si) in s.iter_mut().enumerate() {
                *si += r[k] * (self.means[k][i] - x[i]) / self.variances[k];
            }
        }
        s
    }

    /// Row-wise score of an `[n, d]` batch.
    pub fn score_batch(&self, x: &Tensor) -> Tensor {
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            out.extend(self.score(x.row(r)));
        }
        Tensor::new(x.shape().to_vec(), out).expect("score batch shape")
    }

    /// `p * N(0, sigma^2 I)`: every component variance grows by `sigma^2`.
    pub fn convolve(&self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::contract(format!("convolution needs sigma >= 0, got {sigma}")));
        }
        let s2 = sigma * sigma;
        Ok(Self {
            weights: self.weights.clone(),
            means: self.means.clone(),
            variances: self.variances.iter().map(|v| v + s2).collect(),
        })
    }

    /// The mixture `alpha * p + (1 - alpha) * q` as a single mixture.
    pub fn mix(p: &Self, q: &Self, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || p.dim() != q.dim() {
            return Err(Error::contract("mix needs alpha in [0,1] and equal dimensions"));
        }
        let mut w: Vec<f64> = p.weights.iter().map(|w| alpha * w).collect();
        w.extend(q.weights.iter().map(|w| (1.0 - alpha) * w));
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let mut m = p.means.clone();
        m.extend(q.means.iter().cloned());
        let mut v = p.variances.clone();
        v.extend(q.variances.iter().copied());
        Self::new(w, m, v)
    }

    /// Draws `n` samples with their component labels.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let index = WeightedIndex::new(&self.weights).expect("validated weights");
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = index.sample(rng);
            let sd = self.variances[k].sqrt();
            for i in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                data.push(self.means[k][i] + sd * e);
            }
            labels.push(k);
        }
        (Tensor::new(vec![n, d], data).expect("sample shape"), labels)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        self.sample_labeled(n, rng).0
    }
}

/// `grad_x log(alpha p(x) + (1 - alpha) q(x))`, computed as the score of
/// the pooled mixture whose components are those of `p` and `q`.
pub fn mixture_score_oracle(p: &GaussianMixture, q: &GaussianMixture, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha must lie in [0,1], got {alpha}")));
    }
    Ok(GaussianMixture::mix(p, q, alpha)?.score(x))
}

/// `E[x | x_t]` for `x ~ mixture`, `x_t = x + sigma_t * eps`, computed per
/// component by Gaussian conjugacy.
pub fn posterior_mean_oracle(mixture: &GaussianMixture, x_t: &[f64], sigma_t: f64) -> Result<Vec<f64>> {
    if !(sigma_t > 0.0) {
        return Err(Error::contract(format!("sigma_t must be positive, got {sigma_t}")));
    }
    let s2 = sigma_t * sigma_t;
    let noisy = mixture.convolve(sigma_t)?;
    let r = noisy.responsibilities(x_t);
    let mut out = vec![0.0; x_t.len()];
    for k in 0..mixture.n_components() {
        let v = mixture.variances[k];
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[k] * (v * x_t[i] + s2 * mixture.means[k][i]) / (v + s2);
        }
    }
    Ok(out)
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let hi = f(&p)?;
        p[i] = orig - step;
        let lo = f(&p)?;
        p[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        grad.push((hi - lo) / (2.0 * step));
    }
    Ok(grad)
}
