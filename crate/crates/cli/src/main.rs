//! Experiment runner: dataset generation, training, handover evaluation
//! and reporting, driven by one TOML file.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::TrainMode;
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "fedho", version, about = "Federated proactive handover simulator")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, env = "FEDHO_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true, env = "FEDHO_SEED")]
    seed: Option<u64>,
    /// Overrides `run.output_dir`.
    #[arg(long, global = true, env = "FEDHO_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and test sets and the region layout.
    Generate,
    /// Train a model on the generated data.
    Train {
        #[arg(long, env = "FEDHO_MODE", value_enum, default_value = "centralized")]
        mode: TrainMode,
    },
    /// Compare handover policies and the uplink cost of both schemes.
    Evaluate {
        /// Classifier JSON or raw checkpoint; defaults to the offline FL model.
        #[arg(long, env = "FEDHO_MODEL")]
        model: Option<PathBuf>,
    },
    /// Summarize the evaluation outputs as Markdown.
    Report,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Train { mode } => commands::train(&cfg, *mode),
        Command::Evaluate { model } => commands::evaluate(&cfg, model.as_deref()),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedho: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
