//! `formstruct`: synthesize data, train, evaluate, predict and inspect.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use formstruct::Error as CoreError;

use crate::config::RunConfig;

/// Marks a failure caused by bad input rather than by the run itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

/// Epoch default for FUNSD when the config leaves it unset.
const FUNSD_EPOCHS: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "formstruct", version, about = "Key-value hierarchy extraction for form pages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the dataset dump and crop cache and print split statistics.
    Synthesize {
        #[command(flatten)]
        common: Common,
    },
    /// Train and write last/best checkpoints plus a JSONL log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `--checkpoint` or `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the test split and write the metrics report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the ranked candidates of every query.
        #[arg(long)]
        dump_predictions: bool,
    },
    /// Print the predicted hierarchy of one page.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        page: String,
    },
    /// Summarize a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    let text = std::fs::read_to_string(&common.config)?;
    let raw: toml::Value = toml::from_str(&text).map_err(|e| Invalid(e.to_string()))?;
    let epochs_set = raw.get("training").and_then(|t| t.get("epochs")).is_some();
    if cfg.dataset.funsd.is_some() && !epochs_set {
        cfg.training.epochs = FUNSD_EPOCHS;
    }
    cfg.finalize(common.seed, common.out.clone())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synthesize { common } => commands::synthesize(&load_config(&common)?),
        Command::Train {
            common,
            resume,
            checkpoint,
        } => commands::train(&load_config(&common)?, resume, checkpoint.as_deref()),
        Command::Evaluate {
            common,
            checkpoint,
            dump_predictions,
        } => commands::evaluate_cmd(&load_config(&common)?, checkpoint.as_deref(), dump_predictions),
        Command::Predict {
            common,
            checkpoint,
            page,
        } => commands::predict(&load_config(&common)?, checkpoint.as_deref(), &page),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    }
}

/// Bad input exits with 1, anything else that fails with 2.
fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause.is::<Invalid>()
            || matches!(
                cause.downcast_ref::<CoreError>(),
                Some(
                    CoreError::Validation(_)
                        | CoreError::Config(_)
                        | CoreError::ShapeMismatch { .. }
                        | CoreError::MissingTensor(_)
                        | CoreError::AdapterUnavailable(_)
                        | CoreError::MissingImages { .. }
                        | CoreError::NoAnnotations(_)
                        | CoreError::Annotation { .. }
                )
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_validation(&err) { 1 } else { 2 })
        }
    }
}
