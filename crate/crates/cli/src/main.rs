//! `karl`: train, evaluate and probe the adaptive tokenizer.

mod commands;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use karl_core::KarlError;

use crate::run::MissingConfig;

/// Exit codes other than 0 (success) and 2 (usage error, from clap).
pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const MISSING_CONFIG: u8 = 4;
    pub const DATA: u8 = 5;
    pub const CHECKPOINT: u8 = 6;
}

#[derive(Parser, Debug)]
#[command(name = "karl", version, about = "Single-pass adaptive image tokenizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run config (flat TOML). Defaults to the config stored with the
    /// checkpoint, or the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for every output. Defaults to `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Run directory or `model.json`; the base tokenizer is read from the
    /// same directory. Defaults to the run directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `val`, `train`, or a folder of images.
    #[arg(long, default_value = "val")]
    pub dataset: String,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Fixed,
    Variable,
    Threshold,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the 2-D base tokenizer.
    TrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the base tokenizer if needed, then the adaptive model.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruction metrics at fixed token counts or adaptive targets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "fixed")]
        mode: EvalMode,
        /// Comma-separated target errors.
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
    },
    /// Per-image complexity estimates.
    Kc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        /// Also run the exhaustive prefix search and report agreement.
        #[arg(long)]
        oracle: bool,
        /// Token budget for the single pass. Defaults to `t_max`.
        #[arg(long)]
        budget: Option<usize>,
        /// Histogram bucket width. Defaults to the budget grid step.
        #[arg(long)]
        bucket_width: Option<usize>,
    },
    /// Train and compare one model per architecture cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "encoder_decoder")]
        axis: String,
        /// Comma-separated cell values. Defaults to the 2x2 grid for
        /// `encoder_decoder`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Small preset as `WIDTHxDEPTH`.
        #[arg(long, default_value = "16x1")]
        small: String,
        /// Large preset as `WIDTHxDEPTH`.
        #[arg(long, default_value = "32x2")]
        large: String,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<MissingConfig>().is_some() {
        return exit::MISSING_CONFIG;
    }
    match err.downcast_ref::<KarlError>() {
        Some(KarlError::Config(_)) => exit::CONFIG,
        Some(KarlError::Data(_)) => exit::DATA,
        Some(KarlError::Checkpoint(_) | KarlError::DigestMismatch { .. }) => exit::CHECKPOINT,
        _ => exit::FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainBase { common } => commands::train_base(&common),
        Command::Train { common } => commands::train(&common),
        Command::Eval {
            common,
            model,
            mode,
            eps,
        } => commands::eval(&common, &model, mode, &eps),
        Command::Kc {
            common,
            model,
            eps,
            oracle,
            budget,
            bucket_width,
        } => commands::kc(&common, &model, eps, oracle, budget, bucket_width),
        Command::Sweep {
            common,
            axis,
            values,
            small,
            large,
        } => commands::sweep(&common, &axis, &values, &small, &large),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
