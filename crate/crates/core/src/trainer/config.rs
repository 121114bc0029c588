use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, SWISS_ROLL_NOISE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Training from scratch with an amortized mixture score.
    Smt,
    /// Distillation from a frozen teacher with the explicit parameterization.
    Smd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub total_steps: u64,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub metrics_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Smt,
            total_steps: 50_000,
            seed: 0,
            checkpoint_path: None,
            checkpoint_every: 0,
            metrics_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_gen: f64,
    pub lr_score: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Learning rate of the generator warmup regression.
    pub warmup_lr: f64,
    /// Decay both learning rates linearly to zero at `run.total_steps`.
    pub linear_decay: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_gen: 1e-5,
            lr_score: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            warmup_lr: 1e-3,
            linear_decay: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    pub score_subiters: usize,
    pub warmup_steps: u64,
    /// Score-only updates run after the generator warmup, before the
    /// first alternating step.
    pub score_warmup_steps: u64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Defaults to the per-dimension RMS of the training split.
    pub sigma_data: Option<f64>,
    pub log_sigma_mean: f64,
    pub log_sigma_std: f64,
    pub alpha_grid: usize,
    pub score_zero_fraction: f64,
    /// Draw one noise level per sample instead of one per batch. Alpha
    /// stays per batch.
    pub per_sample_sigma: bool,
    /// Restrict alpha to the endpoints: the generator always uses 1, score
    /// updates pick 0 or 1 with equal probability.
    pub alpha_endpoints_only: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            score_subiters: 5,
            warmup_steps: 2000,
            score_warmup_steps: 0,
            sigma_min: 0.01,
            sigma_max: 5.0,
            sigma_data: None,
            log_sigma_mean: -1.2,
            log_sigma_std: 1.2,
            alpha_grid: 1000,
            score_zero_fraction: 0.25,
            per_sample_sigma: false,
            alpha_endpoints_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the GAN term in the generator update.
    pub lambda_gan: f64,
    /// Weight of the discriminator loss in score updates.
    pub mu_disc: f64,
    pub use_w_alpha: bool,
    pub use_w_dmd: bool,
    /// `w_dmd` from the teacher denoiser during distillation.
    pub smd_w_dmd: bool,
    pub weight_eps: f64,
    pub edm_weighting: bool,
    pub max_consecutive_skips: u32,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_gan: 1e-2,
            mu_disc: 1.0,
            use_w_alpha: true,
            use_w_dmd: true,
            smd_w_dmd: false,
            weight_eps: 1e-8,
            edm_weighting: true,
            max_consecutive_skips: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub gen_hidden: Vec<usize>,
    pub score_hidden: Vec<usize>,
    pub alpha_embedding_dim: usize,
    pub noise_embedding_dim: usize,
    pub fourier_scale: f64,
    pub disc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gen_hidden: vec![128, 128],
            score_hidden: vec![128, 128],
            alpha_embedding_dim: 64,
            noise_embedding_dim: 64,
            fourier_scale: 16.0,
            disc_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub spec: DatasetSpec,
    pub holdout_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: DatasetSpec::SwissRoll { n: 50_000, noise_std: SWISS_ROLL_NOISE, seed: 0 },
            holdout_fraction: 0.2,
            split_seed: 1,
        }
    }
}

/// Where the distillation teacher comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherConfig {
    /// Exact scores of the data mixture (the dataset must be a GMM).
    #[default]
    DataMixture,
    /// A network file written by `pretrain-teacher`.
    Network { path: PathBuf },
}

/// Full training configuration, one TOML section per concern.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let o = &self.optim;
        for (name, v) in [("lr_gen", o.lr_gen), ("lr_score", o.lr_score), ("warmup_lr", o.warmup_lr), ("adam_eps", o.adam_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.weight_decay >= 0.0) {
            return bad("betas must be in [0, 1) and weight_decay >= 0".into());
        }
        let s = &self.schedule;
        if s.batch_size == 0 || s.score_subiters == 0 {
            return bad("batch_size and score_subiters must be >= 1".into());
        }
        if !(0.0 < s.sigma_min && s.sigma_min < s.sigma_max) {
            return bad(format!("need 0 < sigma_min < sigma_max, got {} / {}", s.sigma_min, s.sigma_max));
        }
        if s.sigma_data.is_some_and(|v| !(v > 0.0)) || !(s.log_sigma_std >= 0.0) {
            return bad("sigma_data must be positive and log_sigma_std non-negative".into());
        }
        if s.alpha_grid < 2 || !(0.0..=1.0).contains(&s.score_zero_fraction) {
            return bad("alpha_grid >= 2 and score_zero_fraction in [0, 1] required".into());
        }
        let j = &self.objective;
        if !(j.lambda_gan >= 0.0) || !(j.mu_disc >= 0.0) || !(j.weight_eps > 0.0) {
            return bad("lambda_gan, mu_disc >= 0 and weight_eps > 0 required".into());
        }
        if j.max_consecutive_skips == 0 {
            return bad("max_consecutive_skips must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)".into());
        }
        if self.model.gen_hidden.is_empty() || self.model.score_hidden.is_empty() {
            return bad("networks need at least one hidden layer".into());
        }
        if self.run.mode == Mode::Smd
            && self.teacher == TeacherConfig::DataMixture
            && !matches!(self.data.spec, DatasetSpec::Gmm { .. })
        {
            return bad("an analytic teacher needs a Gaussian-mixture dataset".into());
        }
        Ok(())
    }
}
