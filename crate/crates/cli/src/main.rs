//! `dermpipe`: command-line driver for the dermoscopy pipeline.
//!
//! Exit status: 0 success, 1 invalid input, 2 I/O failure, 64 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dermpipe::config::CONFIG_ENV;

const EXIT_INVALID: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "dermpipe", version, about = "Skin-lesion classification pipeline around precomputed CNN features")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed overriding every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print a JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop to the field of view, correct color and downscale a tree of images.
    Preprocess(commands::PreprocessArgs),
    /// Assign main-source images to lesion-grouped, class-stratified folds.
    SplitFolds(commands::SplitFoldsArgs),
    /// Compute class-balancing loss weights from class counts.
    Weights(commands::WeightsArgs),
    /// Train one fusion head per cross-validation fold.
    TrainHead(commands::TrainHeadArgs),
    /// Predict held-out folds (and optionally a test set) with TTA averaging.
    Predict(commands::PredictArgs),
    /// Exhaustively search the configuration subset with the best CV score.
    EnsembleSearch(commands::EnsembleSearchArgs),
    /// Score predictions: mean sensitivity and per-class AUC, AUC-S, sens/spec.
    Evaluate(commands::EvaluateArgs),
    /// Generate a deterministic synthetic corpus.
    Synth(commands::SynthArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_io() { EXIT_IO } else { EXIT_INVALID })
        }
    }
}
