//! `fakescope`: index labeled image folders, train and evaluate real/fake
//! classifiers, time inference, score images and export Fourier spectra.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fakescope_core::models::BackboneId;

use config::ModelKind;

#[derive(Debug, Parser)]
#[command(name = "fakescope", version, about = "Deepfake image classifier training and evaluation")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (splits, sampling, flips, dropout, init).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "fakescope-out")]
    pub out: PathBuf,
    /// Output format on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    /// One JSON object per line.
    Records,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan labeled folders into an index file.
    Index(IndexArgs),
    /// Train a classifier on an index.
    Train(TrainArgs),
    /// Score a split with a checkpoint and write metrics and the ROC curve.
    Evaluate(EvaluateArgs),
    /// Time evaluation of one or more checkpoints.
    Bench(BenchArgs),
    /// Print probability-of-real and a verdict per image.
    Infer(InferArgs),
    /// Write log-amplitude and phase spectra of images as grayscale PNGs.
    ExtractSpectra(SpectraArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Corpus roots, each holding `real/` and `fake/` subfolders.
    pub roots: Vec<PathBuf>,
    /// Extra folder of real images (repeatable).
    #[arg(long)]
    pub real: Vec<PathBuf>,
    /// Extra folder of fake images (repeatable).
    #[arg(long)]
    pub fake: Vec<PathBuf>,
}

fn parse_backbone(s: &str) -> Result<BackboneId, String> {
    s.parse().map_err(|e: fakescope_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Index file; defaults to `<out>/index.txt`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// b6, b3, b0 or tiny_test.
    #[arg(long, value_parser = parse_backbone)]
    pub backbone: Option<BackboneId>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train the backbone from random init instead of loading weights.
    #[arg(long)]
    pub no_pretrained: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index file; defaults to `<out>/index.txt`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: fakescope_core::Split,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to time (repeat for a side-by-side comparison).
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: fakescope_core::Split,
    #[arg(long)]
    pub n_files: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Runs per checkpoint; the median total is reported.
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpectraArgs {
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined with ": ", skipping causes already spelled out by
/// the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &msg;
        }
    }
    out
}
