//! `mtflow`: generate synthetic data, train, segment, evaluate, or run the
//! whole desk-scale comparison.
//!
//! Settings come from built-in defaults, then `--config <file.toml>`, then
//! flags; later sources win. Each command writes the resulting effective
//! configuration to `config.toml` in its output directory, and passing that
//! file back with `--config` reproduces the run.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use config::Variant;

/// Environment variable selecting the compute device; only `cpu` exists.
pub const DEVICE_ENV: &str = "MTFLOW_DEVICE";

#[derive(Parser, Debug)]
#[command(name = "mtflow", version, about = "Flow-matching segmentation of curvilinear structures")]
struct Cli {
    /// Worker threads for data generation, batches and inference
    /// (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic image/mask dataset with its manifest.
    Generate(GenerateArgs),
    /// Split a dataset and train a model.
    Train(TrainArgs),
    /// Segment images with a trained checkpoint.
    Infer(InferArgs),
    /// Score checkpoints or saved predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Generate, train both models, evaluate and print the comparison.
    Repro(ReproArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    /// Image height and width.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_enum)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    #[arg(long)]
    base_filters: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    groupnorm_groups: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    eta_min: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Training seed (initialization, shuffling, augmentation, flow draws).
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    aux_cfm_weight: Option<f64>,
    #[arg(long)]
    rollout_steps: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct InferFlags {
    /// Euler steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Noise seed of the first image; image `i` uses `seed + i`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Number of noise draws averaged per image.
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `mtflow` or `unet`.
    #[arg(long)]
    model: Option<String>,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    model_flags: ModelFlags,
    #[command(flatten)]
    train_flags: TrainFlags,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of PNG images, or a dataset root containing images/.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every Euler state as numbered frames.
    #[arg(long)]
    emit_trajectory: bool,
    #[command(flatten)]
    model_flags: ModelFlags,
    #[command(flatten)]
    infer_flags: InferFlags,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate; repeat to compare several.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// Directory of saved probability maps (or an infer output with
    /// probmaps/) instead of checkpoints.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Score only the test split defined by the [split] section.
    #[arg(long)]
    test_split: bool,
    /// Also report metrics over all pixels pooled across images.
    #[arg(long)]
    pooled: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    infer_flags: InferFlags,
}

#[derive(Args, Debug)]
struct ReproArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_enum)]
    variant: Option<Variant>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[command(flatten)]
    model_flags: ModelFlags,
    #[command(flatten)]
    train_flags: TrainFlags,
    #[command(flatten)]
    infer_flags: InferFlags,
}

fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => {
            bail!("{DEVICE_ENV}={d:?} is not supported; only \"cpu\" is available")
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    check_device()?;
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Repro(a) => commands::repro(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
