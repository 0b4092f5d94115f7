//! `sae`: survey-weighted direct estimation, Bayesian small area model
//! fitting, leave-one-out model comparison, and simulation studies, as one
//! binary with deterministic, manifest-stamped outputs.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure,
//! 4 usage error.

mod commands;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sae_core::SaeError;

#[derive(Debug, Parser)]
#[command(name = "sae", version, about = "Multivariate small area estimation pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct GlobalArgs {
    /// Master seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stage 1: survey-weighted means and design-based covariances.
    Direct(commands::direct::DirectArgs),
    /// Fit one model and write samples, summaries, and diagnostics.
    Fit(commands::fit::FitArgs),
    /// Leave-one-out LogScore comparison across a model list.
    Loo(commands::loo::LooArgs),
    /// Run a simulation scenario across replicates and models.
    Simulate(commands::simulate::SimulateArgs),
    /// Re-aggregate unit-level samples with a different rural-fraction file.
    Aggregate(commands::aggregate::AggregateArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap already formats help/version and usage errors.
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} worker threads: {e}");
            return ExitCode::from(4);
        }
    }
    if let Err(e) = std::fs::create_dir_all(&cli.global.out_dir) {
        eprintln!("error: cannot create output directory: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Direct(args) => commands::direct::run(&cli.global, args),
        Command::Fit(args) => commands::fit::run(&cli.global, args),
        Command::Loo(args) => commands::loo::run(&cli.global, args),
        Command::Simulate(args) => commands::simulate::run(&cli.global, args),
        Command::Aggregate(args) => commands::aggregate::run(&cli.global, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &SaeError) -> u8 {
    match e {
        SaeError::Usage(_) => 4,
        SaeError::Numerical(_) => 3,
        _ => 2,
    }
}
