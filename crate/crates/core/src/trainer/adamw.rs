use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter
/// tensor in [`ParamSet`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of applied updates (bias-correction exponent).
    pub t: u64,
    /// Updates rejected because a gradient was not finite.
    pub skipped: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0, skipped: 0 }
    }

    /// Applies one update. Returns `false` (and leaves everything but the
    /// skip counter untouched) when any gradient entry is not finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<bool> {
        if grads.len() != params.len() || grads.iter().zip(params.tensors()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::Shape("gradients do not match parameters".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] *= 1.0 - c.lr * c.weight_decay;
                p[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(true)
    }
}

/// Euclidean norm over a list of gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("theta", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_grad_no_decay_keeps_params() {
        let mut p = single(1.5);
        let mut cfg = AdamWConfig::new(0.1);
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..5 {
            assert!(opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap());
        }
        assert_eq!(p.get(0).data()[0], 1.5);
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        for g in [1e-6, 0.3, -7.0, 1e4] {
            let mut p = single(0.0);
            let mut cfg = AdamWConfig::new(1e-3);
            cfg.weight_decay = 0.0;
            let mut opt = AdamW::new(cfg, &p);
            opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let delta = p.get(0).data()[0];
            assert!(delta.abs() <= 1e-3 * (1.0 + 1e-6));
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut p = single(0.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::new(1e-2) }, &p);
        for _ in 0..2000 {
            let th = p.get(0).data()[0];
            opt.step(&mut p, &[Tensor::scalar(2.0 * (th - 3.0))]).unwrap();
        }
        assert!((p.get(0).data()[0] - 3.0).abs() < 1e-3, "{}", p.get(0).data()[0]);
    }

    #[test]
    fn non_finite_grad_is_skipped() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.1), &p);
        assert!(!opt.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap());
        assert_eq!((opt.t, opt.skipped, p.get(0).data()[0]), (0, 1, 2.0));
        assert!(opt.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..AdamWConfig::new(0.1) }, &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert!((p.get(0).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
