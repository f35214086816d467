mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cram_core::error::DiffError;
use cram_core::Error;

/// Clue-conditioned recurrent attention: data, training, checks, rendering.
#[derive(Debug, Parser)]
#[command(name = "cram", version)]
struct Cli {
    /// File of `key = value` lines; flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen(GenArgs),
    /// Train a model and write a metrics log and checkpoints.
    Train(Box<TrainArgs>),
    /// Run the finite-difference gradient suite and sampler properties.
    Check(CheckArgs),
    /// Render predictions of a checkpoint as PGM/PPM images.
    Render(RenderArgs),
    /// Summarize a metrics log.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// classification or inpainting
    #[arg(long)]
    task: Option<String>,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Square canvas side in pixels.
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of the canvas hidden by the centered inpainting mask.
    #[arg(long)]
    occlusion: Option<f64>,
    /// Number of shape classes (classification).
    #[arg(long)]
    classes: Option<usize>,
    /// Output file; defaults to `<task>.crd`.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    task: Option<String>,
    /// Training dataset (CRD1 file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset used at evaluation steps; defaults to the training set.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Directory for `metrics.log` and `model.ckpt`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    /// Total optimizer steps; overrides --epochs.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Number of glimpses N.
    #[arg(long)]
    glimpses: Option<usize>,
    /// Glimpse side in pixels; defaults to 3/8 of the canvas.
    #[arg(long)]
    glimpse_size: Option<usize>,
    /// Recurrent hidden size.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    z_dim: Option<usize>,
    #[arg(long)]
    gv_dim: Option<usize>,
    #[arg(long)]
    mlp_dim: Option<usize>,
    /// Filters per encoder convolution.
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    downsample: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    cls_hidden: Option<usize>,
    #[arg(long)]
    gen_channels: Option<usize>,
    #[arg(long)]
    disc_channels: Option<usize>,
    #[arg(long)]
    disc_hidden: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the masked reconstruction loss.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the adversarial loss.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    /// Multiplier on the clue fed to the encoder; 0 ablates it.
    #[arg(long)]
    clue_scale: Option<f32>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Corrupts a parameter after this many steps (test fixture).
    #[arg(long, hide = true)]
    poison_step: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Random seeds per gradient case.
    #[arg(long)]
    seeds: Option<u64>,
    /// Breaks the backward pass of one op (test fixture).
    #[arg(long, hide = true)]
    fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Samples to render, from the start of the dataset.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Integer upscaling of every output image.
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics log written by `train`.
    log: PathBuf,
}

/// Process outcome with its exit code.
#[derive(Debug)]
pub enum Failure {
    Check(String),
    Usage(String),
    Io(String),
    NonFinite(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::NonFinite(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Io(m) | Failure::NonFinite(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NonFinite { .. } => Failure::NonFinite(msg),
            Error::Diff(DiffError::Config(_) | DiffError::Usage(_) | DiffError::Param { .. }) => Failure::Usage(msg),
            Error::Diff(_) => Failure::Io(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = settings::Settings::load(cli.config.as_deref())
        .map_err(Failure::from)
        .and_then(|s| match cli.command {
            Command::Gen(a) => commands::gen(&s, a),
            Command::Train(a) => commands::train(&s, *a),
            Command::Check(a) => commands::check(&s, a),
            Command::Render(a) => commands::render(a),
            Command::Report(a) => commands::report(a),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
