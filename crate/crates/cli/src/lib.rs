//! Command-line orchestration for the seroprevalence/IFR model.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Run(String),
    #[error("io error: {0}")]
    Io(String),
}

macro_rules! from_err {
    ($($t:ty => $v:ident),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::$v(e.to_string())
            }
        })*
    };
}

from_err!(
    seroifr_core::data::DataError => Data,
    seroifr_core::age_density::DensityError => Data,
    seroifr_core::model::ModelError => Run,
    seroifr_core::sampler::SamplerError => Run,
    seroifr_core::diagnostics::DiagnosticsError => Run,
    seroifr_core::summaries::SummaryError => Run,
    std::io::Error => Io,
    serde_json::Error => Io,
);

#[derive(Debug, Parser)]
#[command(name = "seroifr", version, about = "Joint seroprevalence and IFR estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model and write draws, diagnostics and summaries.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a dataset from known parameters.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Natural-scale parameters as JSON; defaults to the reference truth.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Recompute diagnostics and trace exports from stored draws.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Defaults to `draws.csv` in the output directory.
        #[arg(long)]
        draws: Option<PathBuf>,
    },
    /// Recompute the summary tables from stored draws.
    Summarize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        draws: Option<PathBuf>,
    },
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Fit { common } => commands::fit(&common),
        Command::Simulate { common, truth } => commands::simulate(&common, truth.as_deref()),
        Command::Diagnose { common, draws } => commands::diagnose(&common, draws.as_deref()),
        Command::Summarize { common, draws } => commands::summarize(&common, draws.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
