//! One-step generative models trained with score-of-mixture objectives.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] – a small reverse-mode tape over [`tensor::Tensor`]s.
//! * [`nets`] – generator, amortized denoiser/score network and
//!   discriminator head.
//! * [`schedules`] – noise-level and mixture-weight samplers.
//! * [`objectives`] – mixture denoising score matching, the weighted
//!   generator gradient and the GAN-type regularizer.
//! * [`distill`] – the explicit (teacher + fake score + discriminator)
//!   parameterization used for distillation.
//! * [`oracles`] – analytic Gaussian-mixture ground truth and finite
//!   differences.
//! * [`data`] – synthetic datasets.
//! * [`trainer`] – training loops, AdamW, checkpoints and metrics.
//! * [`eval`] – two-sample metrics and SVG scatter plots.
//! * [`verify`] – checks against analytic ground truth.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod nets;
pub mod objectives;
pub mod oracles;
pub mod schedules;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
