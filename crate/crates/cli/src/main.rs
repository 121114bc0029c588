use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smix::data::{read_csv, write_csv, DatasetSpec};
use smix::eval::{emit_scatter_svg, EvalReport};
use smix::tensor::Tensor;
use smix::trainer::{pretrain_teacher, save_network, Mode, TeacherConfig, TrainConfig, Trainer};
use smix::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "smix", version, about = "One-step generators trained with score-of-mixture objectives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator from scratch on data.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps (default: up to `total_steps`).
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides `run.checkpoint_path`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `run.metrics_path`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Distill a frozen teacher into a one-step generator.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// `analytic` for the exact data-mixture score, or a network file
        /// written by `pretrain-teacher`.
        #[arg(long)]
        teacher: String,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fit a plain denoising score model on data for use as a teacher.
    PretrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        steps: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw generator samples into a CSV file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare generator samples against a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset spec as JSON or TOML (e.g. `kind = "swiss_roll"`).
        #[arg(long)]
        dataset_spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of generated samples (default: dataset size).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        projection_seed: u64,
    },
    /// Run the analytic oracle and property checks.
    Verify,
    /// Scatter plot of samples (optionally over reference points) as SVG.
    Plot {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Checkpoint(_) => EXIT_IO,
        Error::Config(_) | Error::Contract(_) => EXIT_USAGE,
        _ => 1,
    }
}

fn load_config(path: &Path, mode: Mode) -> smix::Result<TrainConfig> {
    let mut c = TrainConfig::from_file(path)?;
    c.run.mode = mode;
    Ok(c)
}

fn read_spec(path: &Path) -> smix::Result<DatasetSpec> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn train(mut config: TrainConfig, resume: Option<PathBuf>, steps: Option<u64>, ckpt: Option<PathBuf>, metrics: Option<PathBuf>) -> smix::Result<()> {
    if ckpt.is_some() {
        config.run.checkpoint_path = ckpt;
    }
    if metrics.is_some() {
        config.run.metrics_path = metrics;
    }
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::load_checkpoint(&path)?;
            t.config.run.checkpoint_path = config.run.checkpoint_path.clone();
            t.config.run.metrics_path = config.run.metrics_path.clone();
            t.config.run.total_steps = config.run.total_steps;
            t
        }
        None => Trainer::new(config)?,
    };
    let remaining = trainer.config.run.total_steps.saturating_sub(trainer.step);
    let steps = steps.unwrap_or(remaining);
    let every = (steps / 20).max(1);
    trainer.run(steps, |r| {
        if (r.step + 1) % every == 0 {
            eprintln!(
                "step {:>7}  score {:.4}  gen {:+.4}  gan {:.4}/{:.4}  {:.0} ms",
                r.step + 1,
                r.loss_score,
                r.loss_gen_surrogate,
                r.loss_gan_gen,
                r.loss_gan_disc,
                r.wall_ms
            );
        }
    })?;
    if trainer.config.run.checkpoint_path.is_none() {
        eprintln!("warning: no checkpoint_path configured; trained state was not saved");
    }
    Ok(())
}

fn run(cli: Cli) -> smix::Result<u8> {
    match cli.command {
        Command::Train { config, resume, steps, checkpoint, metrics } => {
            train(load_config(&config, Mode::Smt)?, resume, steps, checkpoint, metrics)?;
        }
        Command::Distill { config, teacher, steps, checkpoint, metrics } => {
            let mut c = load_config(&config, Mode::Smd)?;
            c.teacher = if teacher == "analytic" {
                TeacherConfig::DataMixture
            } else {
                TeacherConfig::Network { path: PathBuf::from(teacher) }
            };
            c.validate()?;
            train(c, None, steps, checkpoint, metrics)?;
        }
        Command::PretrainTeacher { config, steps, out } => {
            let c = load_config(&config, Mode::Smt)?;
            save_network(&pretrain_teacher(&c, steps)?, &out)?;
        }
        Command::Sample { checkpoint, n, out, seed } => {
            let t = Trainer::load_checkpoint(&checkpoint)?;
            write_csv(&t.sample(n, seed)?, &out)?;
        }
        Command::Eval { checkpoint, dataset_spec, out, n, seed, projection_seed } => {
            let t = Trainer::load_checkpoint(&checkpoint)?;
            let reference = read_spec(&dataset_spec)?.generate()?.points;
            let samples = t.sample(n.unwrap_or(reference.rows()), seed)?;
            let report = EvalReport::compute(&samples, &reference, projection_seed, seed)?;
            report.write_json(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Verify => {
            let checks = smix::verify::run_all();
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            if failed > 0 {
                return Ok(EXIT_VERIFY);
            }
        }
        Command::Plot { samples, reference, out } => {
            let s = read_csv(&samples)?;
            let r = match reference {
                Some(p) => read_csv(&p)?,
                None => Tensor::zeros(&[0, 2]),
            };
            emit_scatter_svg(&s, &r, &out)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
