//! `lorcon`: preprocess KITTI-layout data, train and run the odometry
//! network, evaluate trajectories and check gradients.

mod cache;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};
use lorcon::dataset_io::SequenceId;
use lorcon::model::gradcheck::{SuiteCheck, SUITE_SEEDS};
use lorcon::Error;
use toml::Value;

use commands::{EvalArgs, GradcheckArgs, InferArgs, TrainArgs};
use config::{parse_override, Preset, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "lorcon", version, about = "LiDAR odometry from range images")]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Base values for everything the configuration leaves out.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    /// Dataset root (overrides `dataset`).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    /// Output directory (overrides `output`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Overrides any configuration value, e.g. `--set train.epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    set: Vec<(String, Value)>,

    /// Worker threads for per-frame and per-segment parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project every scan into cached 5-channel frames.
    Preprocess,
    /// Train on the training split, writing checkpoints and a loss log.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from checkpoints/latest.lrck when present.
        #[arg(long)]
        resume: bool,
    },
    /// Predict relative poses and trajectories for test sequences.
    Infer {
        /// Defaults to checkpoints/latest.lrck in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence to run; repeatable. Defaults to the test split.
        #[arg(long = "sequence")]
        sequences: Vec<SequenceId>,
    },
    /// Segment and instantaneous errors of predicted trajectories.
    Eval {
        /// Ground-truth poses; defaults to the cached test sequences.
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Predicted poses in KITTI format.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = SUITE_SEEDS)]
        seeds: u64,
        /// Restrict to one check; repeatable.
        #[arg(long = "check", value_parser = parse_check)]
        checks: Vec<SuiteCheck>,
        /// Test hook: scale the backward pass used by this check.
        #[arg(long, value_parser = parse_check)]
        fault: Option<SuiteCheck>,
        #[arg(long, default_value_t = 1.01)]
        fault_scale: f64,
    },
    /// Ray-cast a synthetic dataset in KITTI layout.
    Synth {
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_check(name: &str) -> Result<SuiteCheck, String> {
    SuiteCheck::from_name(name).ok_or_else(|| {
        let names: Vec<&str> = SuiteCheck::all().iter().map(|c| c.name()).collect();
        format!("unknown check {name:?}; expected one of {}", names.join(", "))
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Io { .. } | Error::Format { .. } | Error::Shape(_) | Error::Geometry(_) => 2,
        Error::Numerical(_) => 3,
    }
}

fn overrides(cli: &Cli) -> Vec<(String, Value)> {
    let path = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
    let mut o = Vec::new();
    if let Some(p) = cli.preset {
        let v = Value::try_from(p).expect("preset serializes");
        o.push(("preset".to_string(), v));
    }
    if let Some(p) = &cli.dataset {
        o.push(("dataset".to_string(), path(p)));
    }
    if let Some(p) = &cli.output {
        o.push(("output".to_string(), path(p)));
    }
    // Explicit flags sit between the file and `--set`.
    match &cli.command {
        Command::Train { epochs, seed, .. } => {
            if let Some(e) = epochs {
                o.push(("train.epochs".into(), Value::Integer(*e as i64)));
            }
            if let Some(s) = seed {
                o.push(("train.seed".into(), Value::Integer(*s as i64)));
            }
        }
        Command::Synth { frames, seed } => {
            if let Some(f) = frames {
                o.push(("synth.frames".into(), Value::Integer(*f as i64)));
            }
            if let Some(s) = seed {
                o.push(("synth.seed".into(), Value::Integer(*s as i64)));
            }
        }
        _ => {}
    }
    o.extend(cli.set.iter().cloned());
    o
}

fn run(cli: &Cli) -> lorcon::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides(cli))?;
    info!("effective configuration:\n{}", cfg.to_toml());
    let written = cfg.write_effective()?;
    info!("configuration written to {}", written.display());
    match &cli.command {
        Command::Preprocess => commands::preprocess(&cfg),
        Command::Train { resume, .. } => commands::train_cmd(&cfg, &TrainArgs { resume: *resume }),
        Command::Infer { checkpoint, sequences } => commands::infer(
            &cfg,
            &InferArgs {
                checkpoint: checkpoint.clone(),
                sequences: sequences.clone(),
            },
        ),
        Command::Eval { gt, pred } => commands::eval(
            &cfg,
            &EvalArgs {
                gt: gt.clone(),
                pred: pred.clone(),
            },
        ),
        Command::Gradcheck {
            seeds,
            checks,
            fault,
            fault_scale,
        } => commands::gradcheck(
            &cfg,
            &GradcheckArgs {
                seeds: *seeds,
                checks: checks.clone(),
                fault: *fault,
                fault_scale: *fault_scale,
            },
        ),
        Command::Synth { .. } => commands::synth(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if cli.workers == 0 {
        error!("--workers must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
        error!("cannot start worker pool: {e}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
