//! Samplers for the noise level `sigma_t` and the mixture weight `alpha`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-normal noise levels, clamped to `[sigma_min, sigma_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub log_mean: f64,
    pub log_std: f64,
    pub sigma_data: f64,
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, sigma_data: f64) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            log_mean: -1.2,
            log_std: 1.2,
            sigma_data,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max) || !self.sigma_max.is_finite() {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.log_std >= 0.0) || !(self.sigma_data > 0.0) {
            return Err(Error::Config("need log_std >= 0 and sigma_data > 0".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = if self.log_std == 0.0 {
            self.log_mean
        } else {
            Normal::new(self.log_mean, self.log_std).expect("validated").sample(rng)
        };
        z.exp().clamp(self.sigma_min, self.sigma_max)
    }
}

/// Mixture weights on the equally spaced grid `k / (grid_size - 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSampler {
    pub grid_size: usize,
    /// Probability that a score-update draw is forced to exactly 0.
    pub score_zero_fraction: f64,
}

impl Default for AlphaSampler {
    fn default() -> Self {
        Self {
            grid_size: 1000,
            score_zero_fraction: 0.25,
        }
    }
}

impl AlphaSampler {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 || !(0.0..=1.0).contains(&self.score_zero_fraction) {
            return Err(Error::Config(format!(
                "alpha grid needs >= 2 points and zero fraction in [0,1], got {} / {}",
                self.grid_size, self.score_zero_fraction
            )));
        }
        Ok(())
    }

    pub fn grid_point(&self, k: usize) -> f64 {
        k as f64 / (self.grid_size - 1) as f64
    }

    /// Uniform over the grid without 0, since the generator update divides
    /// by alpha.
    pub fn sample_generator<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.grid_point(rng.random_range(1..self.grid_size))
    }

    /// 0 with probability `score_zero_fraction`, otherwise uniform over the
    /// whole grid (0 included).
    pub fn sample_score<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.score_zero_fraction {
            0.0
        } else {
            self.grid_point(rng.random_range(0..self.grid_size))
        }
    }
}

/// Lower/upper bound used wherever `ln(alpha / (1 - alpha))` is formed.
pub const ALPHA_LOGIT_CLAMP: f64 = 1e-3;

/// `alpha` clamped to `[1e-3, 1 - 1e-3]`.
pub fn clamp_alpha(alpha: f64) -> f64 {
    alpha.clamp(ALPHA_LOGIT_CLAMP, 1.0 - ALPHA_LOGIT_CLAMP)
}

/// `ln(alpha / (1 - alpha))` after clamping.
pub fn alpha_logit(alpha: f64) -> f64 {
    let a = clamp_alpha(alpha);
    a.ln() - (1.0 - a).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_log_normal() {
        let mut s = NoiseSchedule::new(0.01, 5.0, 1.0).unwrap();
        s.log_std = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(s.sample(&mut rng), (-1.2f64).exp());
        }
        assert!(((-1.2f64).exp() - 0.3012).abs() < 1e-4);
    }

    #[test]
    fn samples_are_clamped() {
        let mut s = NoiseSchedule::new(0.2, 0.5, 1.0).unwrap();
        s.log_std = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..10_000).map(|_| s.sample(&mut rng)).collect();
        assert!(xs.iter().all(|&x| (0.2..=0.5).contains(&x)));
        assert!(xs.contains(&0.2) && xs.contains(&0.5));
    }

    #[test]
    fn log_sigma_mean_monte_carlo() {
        let s = NoiseSchedule::new(1e-12, 1e12, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let mean = (0..n).map(|_| s.sample(&mut rng).ln()).sum::<f64>() / n as f64;
        // standard error 1.2e-3, so 0.005 is about four of them
        assert!((mean + 1.2).abs() < 0.005, "mean log sigma {mean}");
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(NoiseSchedule::new(0.5, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::new(0.0, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::new(0.01, 5.0, 0.0).is_err());
        assert!(AlphaSampler { grid_size: 1, score_zero_fraction: 0.25 }.validate().is_err());
    }

    #[test]
    fn grid_structure() {
        let a = AlphaSampler::default();
        assert_eq!(a.grid_point(0), 0.0);
        assert_eq!(a.grid_point(999), 1.0);
        assert_eq!(a.grid_point(1), 1.0 / 999.0);
        for k in 0..999 {
            assert!((a.grid_point(k + 1) - a.grid_point(k) - 1.0 / 999.0).abs() < 1e-15);
        }
    }

    #[test]
    fn generator_alpha_never_zero_and_uniform() {
        let a = AlphaSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let mut counts = vec![0usize; 1000];
        for _ in 0..n {
            let x = a.sample_generator(&mut rng);
            assert!(x >= 1.0 / 999.0);
            counts[(x * 999.0).round() as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let p = 1.0 / 999.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        let expected = n as f64 * p;
        // each bin within a 3-sigma binomial band, allowing for the handful
        // of the 999 bins expected to land outside by chance
        let outside = counts[1..].iter().filter(|&&c| (c as f64 - expected).abs() > 3.0 * sd).count();
        assert!(outside <= 8, "{outside} bins outside 3 sigma");
        let outside4 = counts[1..].iter().filter(|&&c| (c as f64 - expected).abs() > 4.5 * sd).count();
        assert_eq!(outside4, 0);
    }

    #[test]
    fn score_alpha_zero_fraction() {
        let a = AlphaSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1_000_000;
        let mut zeros = 0;
        for _ in 0..n {
            let x = a.sample_score(&mut rng);
            let k = x * 999.0;
            assert!((k - k.round()).abs() < 1e-9, "off-grid {x}");
            if x == 0.0 {
                zeros += 1;
            }
        }
        let p = zeros as f64 / n as f64;
        assert!((p - (0.25 + 0.75 / 1000.0)).abs() < 0.002, "P(alpha = 0) = {p}");
        let all_zero = AlphaSampler { grid_size: 1000, score_zero_fraction: 1.0 };
        assert!((0..1000).all(|_| all_zero.sample_score(&mut rng) == 0.0));
    }

    #[test]
    fn same_seed_same_sequence() {
        let s = NoiseSchedule::new(0.01, 5.0, 1.0).unwrap();
        let a = AlphaSampler::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| (s.sample(&mut rng), a.sample_score(&mut rng))).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn logit_clamp() {
        assert_eq!(clamp_alpha(0.0), 1e-3);
        assert_eq!(clamp_alpha(1.0), 1.0 - 1e-3);
        assert!(alpha_logit(0.5).abs() < 1e-15);
        assert!(alpha_logit(1.0).is_finite());
    }
}
