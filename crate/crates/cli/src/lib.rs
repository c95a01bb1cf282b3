//! Command-line orchestration for the spatial ratchet simulator.

// `!(x > 0.0)` is used deliberately so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

pub use config::{parse_config, parse_config_str, RunConfig};
pub use error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Simulate,
    Dominate,
    Couple,
    DualityCheck,
    GreensCheck,
    SpreadSweep,
    Moments,
    Converge,
}

#[derive(Debug, Parser)]
#[command(
    name = "ratchet",
    version,
    about = "Exact simulation of the spatial Muller's ratchet"
)]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the replicate count in the configuration.
    #[arg(long)]
    pub replicates: Option<u64>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, env = "RATCHET_THREADS")]
    pub threads: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

/// Parses the configuration, applies flag overrides and runs the command in
/// a pool of the requested size.
pub fn run(args: &Args) -> Result<(), CliError> {
    let mut cfg = parse_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("resolved.toml"), cfg.resolved_toml())?;
    let summary = pool.install(|| commands::dispatch(args.command, &cfg, &args.out))?;
    if !args.quiet {
        eprintln!("{summary}");
    }
    Ok(())
}

/// Exit status of a finished run.
pub fn exit_code(result: &Result<(), CliError>) -> u8 {
    match result {
        Ok(()) => 0,
        Err(e) => e.exit_code(),
    }
}
