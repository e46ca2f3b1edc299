//! `dualhsic` command-line runner.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Output directory used when neither `--out` nor this variable is set is
/// `./results`.
pub const OUTPUT_DIR_ENV: &str = "DUALHSIC_OUTPUT_DIR";

#[derive(Parser)]
#[command(
    name = "dualhsic",
    version,
    about = "HSIC-regularized rehearsal experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
pub struct Common {
    /// Override a config field, e.g. `dualhsic.lambda_x=0`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (defaults to $DUALHSIC_OUTPUT_DIR, then ./results).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment for every configured seed and write a results file.
    Run {
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Skip writing model checkpoints and buffer dumps.
        #[arg(long)]
        no_checkpoint: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the experiment once per value of one config key.
    Sweep {
        config: PathBuf,
        /// Dotted config key to vary.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; bracketed lists stay whole.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run with both signs of dualhsic.lambda_ha and keep the better one.
    SignProbe {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write last-hidden-layer activations of a CSV dataset.
    ExportEmbeddings {
        checkpoint: PathBuf,
        data: PathBuf,
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            seed,
            no_checkpoint,
            common,
        } => commands::run(&config, seed, !no_checkpoint, &common),
        Command::Sweep {
            config,
            axis,
            values,
            common,
        } => commands::sweep(&config, &axis, &values, &common),
        Command::SignProbe { config, common } => commands::sign_probe(&config, &common),
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
        } => commands::export_embeddings(&checkpoint, &data, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
