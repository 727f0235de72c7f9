//! Operator surface of the imputation toolkit: dataset synthesis, gap
//! simulation, training, imputation, evaluation and attention export, all
//! driven by a sectioned TOML config with flag overrides.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ResolvedConfig;

#[derive(Parser)]
#[command(
    name = "gapfill",
    about = "Satellite image time-series imputation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of clean scenes.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Superimpose synthetic gaps onto a clean dataset.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the imputation model on clean sequences with re-sampled gaps.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Stop after at most this many epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Resume from a train_state.bin written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Impute a gapped dataset with a trained checkpoint.
    Impute {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare imputation methods against clean references.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export per-head attention panels for one sample.
    ExportAttention {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample id within the impute input manifest.
        #[arg(long)]
        sample: String,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { common } => {
            let rc = ResolvedConfig::load(&common.config, common.seed, common.out)?;
            commands::cmd_synth(&rc)
        }
        Command::Simulate { common } => {
            let rc = ResolvedConfig::load(&common.config, common.seed, common.out)?;
            commands::cmd_simulate(&rc)
        }
        Command::Train {
            common,
            max_epochs,
            resume,
        } => {
            let rc = ResolvedConfig::load(&common.config, common.seed, common.out)?;
            commands::cmd_train(&rc, max_epochs, resume)
        }
        Command::Impute { common, checkpoint } => {
            let rc = ResolvedConfig::load(&common.config, common.seed, common.out)?;
            commands::cmd_impute(&rc, checkpoint)
        }
        Command::Evaluate { common, checkpoint } => {
            let rc = ResolvedConfig::load(&common.config, common.seed, common.out)?;
            commands::cmd_evaluate(&rc, checkpoint)
        }
        Command::ExportAttention {
            common,
            checkpoint,
            sample,
        } => {
            let rc = ResolvedConfig::load(&common.config, common.seed, common.out)?;
            commands::cmd_export_attention(&rc, checkpoint, &sample)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
