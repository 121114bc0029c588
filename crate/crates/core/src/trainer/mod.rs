//! Alternating training loops (from scratch and distillation), generator
//! warmup, checkpointing and metric logging.

mod adamw;
mod config;
mod container;

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adamw::{global_norm, AdamW, AdamWConfig};
pub use config::{DataConfig, ModelConfig, Mode, ObjectiveConfig, OptimConfig, RunConfig, ScheduleConfig, TeacherConfig, TrainConfig};
pub use container::{Container, MAGIC, VERSION};

use crate::autodiff::Graph;
use crate::data::{BatchIterator, DatasetSpec};
use crate::distill::{explicit_dsm_loss, explicit_generator_surrogate, ExplicitScoreBundle, FrozenScoreNet, Teacher};
use crate::error::{Error, Result};
use crate::nets::{AmortizedScoreNet, GeneratorNet, MlpSpec, ParamSet, ScoreNetConfig};
use crate::objectives::{
    gan_discriminator_loss, gan_generator_loss, gaussian_noise, generator_surrogate, mixture_dsm_loss, split_sigma,
    MixtureBatch, WeightMode,
};
use crate::schedules::{AlphaSampler, NoiseSchedule};
use crate::tensor::Tensor;

/// One JSONL metrics record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_score: f64,
    pub loss_gen_surrogate: f64,
    pub loss_gan_gen: f64,
    pub loss_gan_disc: f64,
    pub grad_norm_gen: f64,
    pub grad_norm_score: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub w_alpha: f64,
    pub w_dmd: f64,
    pub wall_ms: f64,
}

/// Counts of updates that were dropped because something went non-finite.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounter {
    pub consecutive: u32,
    pub total: u64,
}

/// Everything that evolves during training.
pub struct Trainer {
    pub config: TrainConfig,
    pub step: u64,
    pub generator: GeneratorNet,
    pub gen_opt: AdamW,
    /// Amortized mixture-score network, or the fake-score/discriminator
    /// network when distilling.
    pub score: AmortizedScoreNet,
    pub score_opt: AdamW,
    pub rng: ChaCha8Rng,
    pub skips: SkipCounter,
    pub warmed_up: bool,
    batches: BatchIterator,
    holdout: Tensor,
    noise: NoiseSchedule,
    alphas: AlphaSampler,
    teacher: Option<Box<dyn Teacher>>,
    teacher_checksum: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    step: u64,
    warmed_up: bool,
    skips: SkipCounter,
    gen_opt_t: u64,
    gen_opt_skipped: u64,
    score_opt_t: u64,
    score_opt_skipped: u64,
    rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
    batch_cursor: usize,
    generator: MlpSpec,
    score: ScoreNetConfig,
    teacher_checksum: Option<String>,
}

/// Maps a non-finite failure to `None` so the caller can skip the update.
fn finite<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NonFinite(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn adam_config(o: &OptimConfig, lr: f64) -> AdamWConfig {
    AdamWConfig { lr, beta1: o.beta1, beta2: o.beta2, eps: o.adam_eps, weight_decay: o.weight_decay }
}

impl Trainer {
    /// Builds data, networks and optimizers from the configuration. The
    /// generator warmup runs lazily on the first call to [`Trainer::run`].
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.data.spec.generate()?;
        let (train, holdout) = dataset.split(config.data.holdout_fraction, config.data.split_seed)?;
        let d = dataset.dim();
        let s = &config.schedule;
        let sigma_data = match s.sigma_data {
            Some(v) => v,
            None => (train.sq_norm() / train.numel() as f64).sqrt(),
        };
        let seed = config.run.seed;
        let generator = GeneratorNet::for_data(d, &config.model.gen_hidden, seed ^ 0x9e37_79b9)?;
        let mut sc = ScoreNetConfig::new(d, sigma_data, seed ^ 0x7f4a_7c15);
        sc.hidden_dims = config.model.score_hidden.clone();
        sc.alpha_embedding_dim = config.model.alpha_embedding_dim;
        sc.noise_embedding_dim = config.model.noise_embedding_dim;
        sc.fourier_scale = config.model.fourier_scale;
        sc.disc_hidden = config.model.disc_hidden;
        sc.sigma_min = s.sigma_min;
        sc.sigma_max = s.sigma_max;
        sc.alpha_conditioning = config.run.mode == Mode::Smt;
        let score = AmortizedScoreNet::new(sc)?;
        let teacher = match config.run.mode {
            Mode::Smt => None,
            Mode::Smd => Some(build_teacher(&config, d)?),
        };
        let teacher_checksum = teacher.as_ref().map(|t| t.checksum());
        let mut noise = NoiseSchedule::new(s.sigma_min, s.sigma_max, sigma_data)?;
        noise.log_mean = s.log_sigma_mean;
        noise.log_std = s.log_sigma_std;
        noise.validate()?;
        let alphas = AlphaSampler { grid_size: s.alpha_grid, score_zero_fraction: s.score_zero_fraction };
        alphas.validate()?;
        let batches = BatchIterator::new(train, s.batch_size, seed ^ 0x5bd1_e995)?;
        Ok(Self {
            gen_opt: AdamW::new(adam_config(&config.optim, config.optim.lr_gen), generator.params()),
            score_opt: AdamW::new(adam_config(&config.optim, config.optim.lr_score), score.params()),
            generator,
            score,
            rng: ChaCha8Rng::seed_from_u64(seed),
            skips: SkipCounter::default(),
            warmed_up: false,
            step: 0,
            batches,
            holdout,
            noise,
            alphas,
            teacher,
            teacher_checksum,
            config,
        })
    }

    pub fn holdout(&self) -> &Tensor {
        &self.holdout
    }

    pub fn noise_schedule(&self) -> &NoiseSchedule {
        &self.noise
    }

    pub fn teacher(&self) -> Option<&dyn Teacher> {
        self.teacher.as_deref()
    }

    /// Generator samples from fresh latents drawn with `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian_noise(&mut rng, n, self.generator.latent_dim());
        if n == 0 {
            return Ok(Tensor::zeros(&[0, self.generator.data_dim()]));
        }
        self.generator.sample(&z)
    }

    fn draw_sigma(&mut self, n: usize) -> Vec<f64> {
        let k = if self.config.schedule.per_sample_sigma { n } else { 1 };
        (0..k).map(|_| self.noise.sample(&mut self.rng)).collect()
    }

    fn generator_alpha(&mut self) -> f64 {
        if self.config.schedule.alpha_endpoints_only {
            1.0
        } else {
            self.alphas.sample_generator(&mut self.rng)
        }
    }

    fn score_alpha(&mut self) -> f64 {
        if self.config.schedule.alpha_endpoints_only {
            if self.rng.random::<bool>() { 1.0 } else { 0.0 }
        } else {
            self.alphas.sample_score(&mut self.rng)
        }
    }

    fn weight_mode(&self) -> WeightMode {
        let o = &self.config.objective;
        match self.config.run.mode {
            Mode::Smt => WeightMode { w_alpha: o.use_w_alpha, w_dmd: o.use_w_dmd, eps: o.weight_eps },
            Mode::Smd => WeightMode { w_alpha: false, w_dmd: o.smd_w_dmd, eps: o.weight_eps },
        }
    }

    fn note_update(&mut self, applied: bool) -> Result<()> {
        if applied {
            self.skips.consecutive = 0;
            return Ok(());
        }
        self.skips.consecutive += 1;
        self.skips.total += 1;
        if self.skips.consecutive >= self.config.objective.max_consecutive_skips {
            return Err(Error::Aborted(format!(
                "{} consecutive non-finite updates at step {}",
                self.skips.consecutive, self.step
            )));
        }
        Ok(())
    }

    /// One generator update. Fills the generator fields of `rep`.
    fn generator_update(&mut self, rep: &mut StepReport) -> Result<()> {
        let b = self.config.schedule.batch_size;
        let z = gaussian_noise(&mut self.rng, b, self.generator.latent_dim());
        let eps = gaussian_noise(&mut self.rng, b, self.generator.data_dim());
        let alpha = self.generator_alpha();
        let sigma = self.draw_sigma(b);
        rep.alpha = alpha;
        rep.sigma = sigma.iter().sum::<f64>() / sigma.len() as f64;
        let lambda = self.config.objective.lambda_gan;
        let mode = self.weight_mode();

        let outcome = finite((|| {
            let mut g = Graph::new();
            let gp = self.generator.params().bind(&mut g, true);
            let zv = g.constant(z);
            let x = self.generator.forward(&mut g, &gp, zv)?;
            let up = match self.config.run.mode {
                Mode::Smt => generator_surrogate(&mut g, &self.score, x, &eps, alpha, &sigma, mode)?,
                Mode::Smd => {
                    let bundle = ExplicitScoreBundle { fake: self.score.clone() };
                    let teacher = self.teacher.as_deref().expect("distillation has a teacher");
                    explicit_generator_surrogate(&mut g, &bundle, teacher, x, &eps, alpha, &sigma, mode)?
                }
            };
            let mut total = up.surrogate;
            let mut gan_value = 0.0;
            if lambda > 0.0 {
                let sp = self.score.params().bind(&mut g, false);
                let gan = gan_generator_loss(&mut g, &self.score, &sp, up.x_t, alpha, &sigma)?;
                gan_value = g.value(gan).item()?;
                let scaled = g.mul_scalar(gan, lambda)?;
                total = g.add(total, scaled)?;
            }
            let surrogate = g.value(up.surrogate).item()?;
            let grads = g.backward(total)?;
            let grads = self.generator.params().grads(&gp, &grads);
            Ok((grads, surrogate, gan_value, up.mean_w_alpha, up.mean_w_dmd))
        })())?;

        let applied = match outcome {
            Some((grads, surrogate, gan, wa, wd)) => {
                rep.loss_gen_surrogate = surrogate;
                rep.loss_gan_gen = gan;
                rep.grad_norm_gen = global_norm(&grads);
                rep.w_alpha = wa;
                rep.w_dmd = wd;
                self.gen_opt.step(self.generator.params_mut(), &grads)?
            }
            None => false,
        };
        self.note_update(applied)
    }

    /// One score (or fake-score/discriminator) update.
    fn score_update(&mut self, rep: &mut StepReport) -> Result<()> {
        let b = self.config.schedule.batch_size;
        let real = self.batches.next_batch();
        let zf = gaussian_noise(&mut self.rng, b, self.generator.latent_dim());
        let fake = self.generator.sample(&zf)?;
        let alpha = self.score_alpha();
        let sigma = self.draw_sigma(2 * b);
        let mut batch = MixtureBatch::sample(real, fake, alpha, sigma[0], &mut self.rng);
        batch.cond.sigma = sigma;
        let mu = self.config.objective.mu_disc;
        let edm = self.config.objective.edm_weighting;

        let outcome = finite((|| {
            let mut g = Graph::new();
            let p = self.score.params().bind(&mut g, true);
            let mut disc_value = 0.0;
            let (loss, value) = match self.config.run.mode {
                Mode::Smt => {
                    let l = mixture_dsm_loss(&mut g, &self.score, &p, &batch, edm)?;
                    let mut total = l.loss;
                    if mu > 0.0 {
                        let (_, noisy) = batch.stacked()?;
                        let nr = batch.real.rows();
                        let idx: Vec<usize> = (0..noisy.rows()).collect();
                        let real_t = noisy.select_rows(&idx[..nr]);
                        let fake_t = noisy.select_rows(&idx[nr..]);
                        let (sr, sf) = split_sigma(&batch.cond.sigma, nr);
                        let disc = disc_loss(&mut g, &self.score, &p, &real_t, &fake_t, alpha, &sr, &sf)?;
                        disc_value = g.value(disc).item()?;
                        let scaled = g.mul_scalar(disc, mu)?;
                        total = g.add(total, scaled)?;
                    }
                    (total, l.value)
                }
                Mode::Smd => {
                    let bundle = ExplicitScoreBundle { fake: self.score.clone() };
                    let teacher = self.teacher.as_deref().expect("distillation has a teacher");
                    let l = explicit_dsm_loss(&mut g, &bundle, &p, teacher, &batch, edm)?;
                    (l.loss, l.value)
                }
            };
            let grads = g.backward(loss)?;
            Ok((self.score.params().grads(&p, &grads), value, disc_value))
        })())?;

        let applied = match outcome {
            Some((grads, value, disc)) => {
                rep.loss_score = value;
                rep.loss_gan_disc = disc;
                rep.grad_norm_score = global_norm(&grads);
                self.score_opt.step(self.score.params_mut(), &grads)?
            }
            None => false,
        };
        self.note_update(applied)
    }

    /// One alternating step: a generator update followed by
    /// `score_subiters` score updates.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let start = Instant::now();
        let mut rep = StepReport { step: self.step, ..Default::default() };
        let o = &self.config.optim;
        if o.linear_decay {
            let left = 1.0 - self.step as f64 / self.config.run.total_steps.max(1) as f64;
            self.gen_opt.config.lr = o.lr_gen * left;
            self.score_opt.config.lr = o.lr_score * left;
        }
        self.generator_update(&mut rep)?;
        let gen_before = cfg!(debug_assertions).then(|| self.generator.params().flatten());
        for _ in 0..self.config.schedule.score_subiters {
            self.score_update(&mut rep)?;
        }
        if let Some(before) = gen_before {
            debug_assert!(before == self.generator.params().flatten(), "score updates moved the generator");
        }
        if let (Some(t), Some(c)) = (&self.teacher, &self.teacher_checksum) {
            debug_assert_eq!(&t.checksum(), c, "teacher changed");
        }
        self.step += 1;
        rep.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(rep)
    }

    /// Runs the warmup if still pending.
    pub fn warmup(&mut self) -> Result<()> {
        if self.warmed_up {
            return Ok(());
        }
        let s = &self.config.schedule;
        let (steps, b) = (s.warmup_steps, s.batch_size);
        let lr = self.config.optim.warmup_lr;
        let train = self.batches_points().clone();
        pretrain_generator(&mut self.generator, &train, steps, b, adam_config(&self.config.optim, lr), &mut self.rng)?;
        let mut rep = StepReport::default();
        for _ in 0..self.config.schedule.score_warmup_steps {
            self.score_update(&mut rep)?;
        }
        self.warmed_up = true;
        Ok(())
    }

    fn batches_points(&self) -> &Tensor {
        self.batches.points()
    }

    /// Runs up to `steps` more steps (bounded by `total_steps`), calling
    /// `on_step` after each and saving checkpoints as configured.
    pub fn run<F: FnMut(&StepReport)>(&mut self, steps: u64, mut on_step: F) -> Result<()> {
        self.warmup()?;
        let mut metrics = match &self.config.run.metrics_path {
            Some(p) => Some(MetricsLog::open(p)?),
            None => None,
        };
        let end = (self.step + steps).min(self.config.run.total_steps);
        while self.step < end {
            let rep = self.train_step()?;
            if let Some(m) = metrics.as_mut() {
                m.write(&rep)?;
            }
            on_step(&rep);
            let every = self.config.run.checkpoint_every;
            if let Some(path) = self.config.run.checkpoint_path.clone() {
                if every > 0 && self.step.is_multiple_of(every) {
                    self.save_checkpoint(&path)?;
                }
            }
        }
        if let Some(m) = metrics.as_mut() {
            m.flush()?;
        }
        if let Some(path) = self.config.run.checkpoint_path.clone() {
            self.save_checkpoint(&path)?;
        }
        Ok(())
    }

    fn to_container(&self) -> Result<Container> {
        let (order, cursor, batch_rng) = self.batches.state();
        let meta = Meta {
            kind: "trainer".into(),
            step: self.step,
            warmed_up: self.warmed_up,
            skips: self.skips,
            gen_opt_t: self.gen_opt.t,
            gen_opt_skipped: self.gen_opt.skipped,
            score_opt_t: self.score_opt.t,
            score_opt_skipped: self.score_opt.skipped,
            rng: self.rng.clone(),
            batch_rng,
            batch_cursor: cursor,
            generator: self.generator.spec().clone(),
            score: self.score.config().clone(),
            teacher_checksum: self.teacher_checksum.clone(),
        };
        let mut arrays = Vec::new();
        push_params(&mut arrays, "gen", self.generator.params(), None);
        push_params(&mut arrays, "gen_opt.m", self.generator.params(), Some(&self.gen_opt.m));
        push_params(&mut arrays, "gen_opt.v", self.generator.params(), Some(&self.gen_opt.v));
        push_params(&mut arrays, "score", self.score.params(), None);
        push_params(&mut arrays, "score_opt.m", self.score.params(), Some(&self.score_opt.m));
        push_params(&mut arrays, "score_opt.v", self.score.params(), Some(&self.score_opt.v));
        arrays.push(("batches.order".into(), Tensor::column(order.iter().map(|&i| i as f64).collect())));
        Ok(Container {
            config: serde_json::to_string(&self.config)?,
            meta: serde_json::to_string(&meta)?,
            arrays,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    /// Restores a trainer exactly as it was saved; nothing is returned on
    /// any inconsistency.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    fn from_container(c: &Container) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(&c.config)?;
        let meta: Meta = serde_json::from_str(&c.meta)?;
        if meta.kind != "trainer" {
            return Err(Error::Checkpoint(format!("expected a trainer checkpoint, found `{}`", meta.kind)));
        }
        let mut t = Self::new(config)?;
        if t.generator.spec() != &meta.generator || t.score.config() != &meta.score {
            return Err(Error::Checkpoint("network architecture differs from the configuration".into()));
        }
        if t.teacher_checksum != meta.teacher_checksum {
            return Err(Error::Checkpoint("teacher differs from the one used for training".into()));
        }
        read_params(c, "gen", t.generator.params_mut())?;
        read_params(c, "score", t.score.params_mut())?;
        t.gen_opt.m = read_moments(c, "gen_opt.m", t.generator.params())?;
        t.gen_opt.v = read_moments(c, "gen_opt.v", t.generator.params())?;
        t.score_opt.m = read_moments(c, "score_opt.m", t.score.params())?;
        t.score_opt.v = read_moments(c, "score_opt.v", t.score.params())?;
        t.gen_opt.t = meta.gen_opt_t;
        t.gen_opt.skipped = meta.gen_opt_skipped;
        t.score_opt.t = meta.score_opt_t;
        t.score_opt.skipped = meta.score_opt_skipped;
        let order: Vec<usize> = c.array("batches.order")?.data().iter().map(|&v| v as usize).collect();
        t.batches.restore(order, meta.batch_cursor, meta.batch_rng)?;
        t.rng = meta.rng;
        t.step = meta.step;
        t.warmed_up = meta.warmed_up;
        t.skips = meta.skips;
        Ok(t)
    }
}

#[allow(clippy::too_many_arguments)]
fn disc_loss(
    g: &mut Graph,
    net: &AmortizedScoreNet,
    p: &crate::nets::Bound,
    real_t: &Tensor,
    fake_t: &Tensor,
    alpha: f64,
    sr: &[f64],
    sf: &[f64],
) -> Result<crate::autodiff::Var> {
    if sr == sf && sr.len() == 1 {
        return gan_discriminator_loss(g, net, p, real_t, fake_t, alpha, sr);
    }
    let xr = g.constant(real_t.clone());
    let xf = g.constant(fake_t.clone());
    let lr = net.logit(g, p, xr, sr)?;
    let lf = net.logit(g, p, xf, sf)?;
    crate::objectives::gan_discriminator_loss_from_logits(g, lr, lf, alpha)
}

fn push_params(out: &mut Vec<(String, Tensor)>, prefix: &str, params: &ParamSet, values: Option<&[Tensor]>) {
    for (i, name) in params.names().iter().enumerate() {
        let t = values.map_or_else(|| params.get(i).clone(), |v| v[i].clone());
        out.push((format!("{prefix}.{name}"), t));
    }
}

fn read_params(c: &Container, prefix: &str, params: &mut ParamSet) -> Result<()> {
    let loaded = read_moments(c, prefix, params)?;
    for (i, t) in loaded.into_iter().enumerate() {
        *params.get_mut(i) = t;
    }
    Ok(())
}

fn read_moments(c: &Container, prefix: &str, params: &ParamSet) -> Result<Vec<Tensor>> {
    params
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let key = format!("{prefix}.{name}");
            let t = c.array(&key)?;
            if t.shape() != params.get(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "`{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    params.get(i).shape()
                )));
            }
            Ok(t.clone())
        })
        .collect()
}

fn build_teacher(config: &TrainConfig, dim: usize) -> Result<Box<dyn Teacher>> {
    match (&config.teacher, &config.data.spec) {
        (TeacherConfig::DataMixture, DatasetSpec::Gmm { mixture, .. }) => Ok(Box::new(mixture.clone())),
        (TeacherConfig::DataMixture, _) => Err(Error::Config("an analytic teacher needs a Gaussian-mixture dataset".into())),
        (TeacherConfig::Network { path }, _) => {
            let net = load_network(path)?;
            if net.config().data_dim != dim {
                return Err(Error::Config(format!(
                    "teacher has dimension {}, data has {dim}",
                    net.config().data_dim
                )));
            }
            Ok(Box::new(FrozenScoreNet::new(net)))
        }
    }
}

/// Saves a standalone score network (a distillation teacher).
pub fn save_network(net: &AmortizedScoreNet, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    push_params(&mut arrays, "score", net.params(), None);
    Container {
        config: serde_json::to_string(net.config())?,
        meta: "{\"kind\":\"network\"}".into(),
        arrays,
    }
    .save(path)
}

pub fn load_network(path: &Path) -> Result<AmortizedScoreNet> {
    let c = Container::load(path)?;
    let meta: serde_json::Value = serde_json::from_str(&c.meta)?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some("network") {
        return Err(Error::Checkpoint("not a network file".into()));
    }
    let config: ScoreNetConfig = serde_json::from_str(&c.config)?;
    let mut net = AmortizedScoreNet::new(config)?;
    read_params(&c, "score", net.params_mut())?;
    Ok(net)
}

/// Plain denoising score matching on data (alpha fixed to 1, no
/// generator), producing a network usable as a distillation teacher.
pub fn pretrain_teacher(config: &TrainConfig, steps: u64) -> Result<AmortizedScoreNet> {
    let mut cfg = config.clone();
    cfg.run.mode = Mode::Smt;
    let mut t = Trainer::new(cfg)?;
    let mut sc = t.score.config().clone();
    sc.alpha_conditioning = false;
    let mut net = AmortizedScoreNet::new(sc)?;
    let mut opt = AdamW::new(adam_config(&t.config.optim, t.config.optim.lr_score), net.params());
    let b = t.config.schedule.batch_size;
    let edm = t.config.objective.edm_weighting;
    for _ in 0..steps {
        let real = t.batches.next_batch();
        let sigma = t.draw_sigma(b);
        let mut batch = MixtureBatch::sample(real, Tensor::zeros(&[0, net.config().data_dim]), 1.0, sigma[0], &mut t.rng);
        batch.cond.sigma = sigma;
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, true);
        let grads = finite(mixture_dsm_loss(&mut g, &net, &p, &batch, edm).and_then(|l| g.backward(l.loss)))?;
        let applied = match grads {
            Some(gr) => {
                let grads = net.params().grads(&p, &gr);
                opt.step(net.params_mut(), &grads)?
            }
            None => false,
        };
        t.note_update(applied)?;
    }
    Ok(net)
}

/// Number of random directions per warmup step.
pub const WARMUP_PROJECTIONS: usize = 32;

/// Generator warmup: along each of [`WARMUP_PROJECTIONS`] random
/// directions, the projected generator outputs are regressed onto the
/// sorted projections of a data batch (each sample is matched to the data
/// point of equal rank). This minimizes a minibatch sliced Wasserstein
/// distance and places the generator's range on the data before the
/// alternating updates start.
pub fn pretrain_generator(
    gen: &mut GeneratorNet,
    data: &Tensor,
    steps: u64,
    batch_size: usize,
    adam: AdamWConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if data.rows() < batch_size || gen.data_dim() != data.cols() || gen.latent_dim() != data.cols() {
        return Err(Error::contract("warmup needs latent dim = data dim and at least one full batch"));
    }
    let d = data.cols();
    let k = WARMUP_PROJECTIONS;
    let mut opt = AdamW::new(adam, gen.params());
    for _ in 0..steps {
        let idx = index::sample(rng, data.rows(), batch_size).into_vec();
        let x = data.select_rows(&idx);
        let z = gaussian_noise(rng, batch_size, d);
        let mut dirs = Vec::with_capacity(d * k);
        let units: Vec<Vec<f64>> = (0..k).map(|_| unit_vector(rng, d)).collect();
        for i in 0..d {
            dirs.extend(units.iter().map(|u| u[i]));
        }
        let dirs = Tensor::matrix(d, k, dirs)?;

        let mut g = Graph::new();
        let p = gen.params().bind(&mut g, true);
        let zv = g.constant(z);
        let out = gen.forward(&mut g, &p, zv)?;
        let u = g.constant(dirs);
        let proj = g.matmul(out, u)?;
        let proj_vals = g.value(proj).clone();
        let mut target = vec![0.0; batch_size * k];
        for (j, unit) in units.iter().enumerate() {
            let mut xs: Vec<f64> = (0..batch_size).map(|r| x.row(r).iter().zip(unit).map(|(a, b)| a * b).sum()).collect();
            xs.sort_by(f64::total_cmp);
            let mut order: Vec<usize> = (0..batch_size).collect();
            order.sort_by(|&a, &b| proj_vals.get2(a, j).total_cmp(&proj_vals.get2(b, j)));
            for (rank, &row) in order.iter().enumerate() {
                target[row * k + j] = xs[rank];
            }
        }
        let tv = g.constant(Tensor::matrix(batch_size, k, target)?);
        let diff = g.sub(proj, tv)?;
        let sq = g.square(diff)?;
        let loss = g.mean(sq)?;
        let grads = g.backward(loss)?;
        let grads = gen.params().grads(&p, &grads);
        opt.step(gen.params_mut(), &grads)?;
    }
    Ok(())
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_noise(rng, 1, d).into_data();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Append-only JSONL metrics file.
pub struct MetricsLog {
    out: BufWriter<std::fs::File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, rep: &StepReport) -> Result<()> {
        serde_json::to_writer(&mut self.out, rep)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Mean distance from each sample to its nearest data point.
pub fn mean_nn_distance(samples: &Tensor, data: &Tensor) -> f64 {
    let n = samples.rows();
    (0..n)
        .map(|i| {
            let a = samples.row(i);
            (0..data.rows())
                .map(|j| a.iter().zip(data.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::swiss_roll;

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.data.spec = DatasetSpec::SwissRoll { n: 600, noise_std: 0.05, seed: 2 };
        c.schedule.batch_size = 32;
        c.schedule.warmup_steps = 20;
        c.schedule.score_subiters = 2;
        c.model.gen_hidden = vec![16];
        c.model.score_hidden = vec![16, 16];
        c.model.alpha_embedding_dim = 8;
        c.model.noise_embedding_dim = 8;
        c.model.disc_hidden = 8;
        c.run.total_steps = 1000;
        c
    }

    #[test]
    fn warmup_zero_steps_is_identity() {
        let mut gen = GeneratorNet::for_data(2, &[8], 0).unwrap();
        let before = gen.params().clone();
        let data = swiss_roll(100, 0.05, 0).unwrap().points;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        pretrain_generator(&mut gen, &data, 0, 32, AdamWConfig::new(1e-3), &mut rng).unwrap();
        assert_eq!(gen.params(), &before);
    }

    #[test]
    fn warmup_moves_samples_toward_data() {
        let data = swiss_roll(2000, 0.05, 0).unwrap().points;
        let run = |steps| {
            let mut gen = GeneratorNet::for_data(2, &[32, 32], 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            pretrain_generator(&mut gen, &data, steps, 64, AdamWConfig::new(1e-3), &mut rng).unwrap();
            let z = gaussian_noise(&mut ChaCha8Rng::seed_from_u64(9), 300, 2);
            (mean_nn_distance(&gen.sample(&z).unwrap(), &data), gen.params().flatten())
        };
        let (before, _) = run(0);
        let (after, p1) = run(300);
        assert!(after < before, "{after} vs {before}");
        assert_eq!(p1, run(300).1);
    }

    #[test]
    fn linear_decay_scales_learning_rates() {
        let mut c = tiny_config();
        c.run.total_steps = 4;
        c.optim.linear_decay = true;
        let mut t = Trainer::new(c).unwrap();
        // the third step (index 2) ran at half the base rates
        t.run(3, |_| {}).unwrap();
        assert!((t.gen_opt.config.lr - 0.5 * t.config.optim.lr_gen).abs() < 1e-18);
        assert!((t.score_opt.config.lr - 0.5 * t.config.optim.lr_score).abs() < 1e-18);
    }

    #[test]
    fn score_warmup_leaves_generator_alone() {
        let mut c = tiny_config();
        c.schedule.warmup_steps = 0;
        c.schedule.score_warmup_steps = 3;
        let mut t = Trainer::new(c).unwrap();
        let (gen, score) = (t.generator.params().flatten(), t.score.params().flatten());
        t.warmup().unwrap();
        assert_eq!(t.generator.params().flatten(), gen);
        assert_ne!(t.score.params().flatten(), score);
        assert_eq!(t.step, 0);
    }

    #[test]
    fn one_step_moves_both_networks() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        t.warmup().unwrap();
        let (g0, s0) = (t.generator.params().flatten(), t.score.params().flatten());
        let rep = t.train_step().unwrap();
        assert_ne!(g0, t.generator.params().flatten());
        assert_ne!(s0, t.score.params().flatten());
        assert_eq!((t.gen_opt.t, t.score_opt.t), (1, 2));
        assert!(rep.loss_score.is_finite() && rep.loss_gan_disc > 0.0);
    }

    #[test]
    fn regularizers_off_reports_zero_gan_terms() {
        let mut c = tiny_config();
        c.objective.lambda_gan = 0.0;
        c.objective.mu_disc = 0.0;
        let mut t = Trainer::new(c).unwrap();
        let rep = t.train_step().unwrap();
        assert_eq!((rep.loss_gan_gen, rep.loss_gan_disc), (0.0, 0.0));
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let c = tiny_config();
        let mut full = Trainer::new(c.clone()).unwrap();
        full.run(6, |_| {}).unwrap();
        let mut half = Trainer::new(c).unwrap();
        half.run(3, |_| {}).unwrap();
        let bytes = half.checkpoint_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(resumed.checkpoint_bytes().unwrap(), bytes);
        resumed.run(3, |_| {}).unwrap();
        assert_eq!(resumed.checkpoint_bytes().unwrap(), full.checkpoint_bytes().unwrap());
    }

    #[test]
    fn smd_keeps_teacher_fixed() {
        let mut c = tiny_config();
        c.run.mode = Mode::Smd;
        let gm = crate::oracles::GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.0, 0.0], vec![1.0, 0.5]], vec![0.1, 0.2]).unwrap();
        c.data.spec = DatasetSpec::Gmm { mixture: gm, n: 600, seed: 1 };
        let mut t = Trainer::new(c).unwrap();
        let before = t.teacher().unwrap().checksum();
        let rep = t.train_step().unwrap();
        assert!(rep.loss_score.is_finite() && rep.loss_gen_surrogate.is_finite());
        assert_eq!(before, t.teacher().unwrap().checksum());
    }
}
