//! `apce`: design, fit, analyze, compare and optimize from one run config.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 compute failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::{Overrides, Run};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Compute(_) => 2,
        }
    }
}

impl From<apce_core::Error> for CliError {
    fn from(e: apce_core::Error) -> Self {
        use apce_core::Error as E;
        match e {
            E::InvalidParameter(_)
            | E::Domain { .. }
            | E::DimensionMismatch { .. }
            | E::EmptyDesign
            | E::VersionMismatch { .. }
            | E::Checksum { .. }
            | E::Malformed(_)
            | E::Table { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Compute(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Compute(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Compute(format!("csv: {e}"))
    }
}

#[derive(Parser)]
#[command(name = "apce", version, about = "Adaptive sparse polynomial chaos surrogates and swarm optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    config: PathBuf,
    /// Override the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; beats the config file and APCE_OUT_DIR.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Suppress progress summaries.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the experimental design (and evaluate the oracle on it).
    Design(Common),
    /// Fit one adaptive expansion per output channel.
    Fit(Common),
    /// Moments, Sobol indices, percentiles and densities of fitted models.
    Analyze(Common),
    /// Compare model moments with direct Monte Carlo on the oracle.
    McCompare(Common),
    /// Swarm-optimize the design variables against the target pattern.
    Optimize(Common),
}

type Action = fn(&Ctx) -> Result<(), CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (common, action): (&Common, Action) = match &cli.command {
        Command::Design(c) => (c, commands::design),
        Command::Fit(c) => (c, commands::fit),
        Command::Analyze(c) => (c, commands::analyze),
        Command::McCompare(c) => (c, commands::mc_compare),
        Command::Optimize(c) => (c, commands::optimize_cmd),
    };
    let overrides = Overrides {
        seed: common.seed,
        out_dir: common.out_dir.clone(),
        env_out_dir: std::env::var_os("APCE_OUT_DIR").map(PathBuf::from),
    };
    let result = Run::load(&common.config, overrides).and_then(|run| action(&Ctx { run, quiet: common.quiet }));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
