//! `lagrange-units`: train, solve and verify constrained-output networks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lagrange_units::SolverMode;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  invalid configuration, input file, schema, dimensions or rank
  3  numerical divergence during training or a solve
  4  I/O failure while writing outputs
  5  verify: at least one invariant failed
  6  solve: the multiplier solve did not converge (JSON is still printed)

Environment:
  LAGRANGE_UNITS_THREADS  caps the worker threads used for per-pattern solves";

#[derive(Debug, Parser)]
#[command(name = "lagrange-units", version, about, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the base XOR network and store it with its constraint matrix.
    TrainBase {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base seed; also the first run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the constrained trunk once per run seed and aggregate the runs.
    TrainConstrained {
        #[arg(long)]
        config: Option<PathBuf>,
        /// First run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive run seeds.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// gd or newton.
        #[arg(long)]
        solver_mode: Option<SolverMode>,
    },
    /// Solve the multipliers of one instance and print them as JSON.
    Solve {
        /// Dual-model or constrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON object with `x` and optionally `b` and `lambda0`.
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// gd or newton.
        #[arg(long)]
        solver_mode: Option<SolverMode>,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Multiplies every tolerance.
        #[arg(long)]
        tolerance_scale: Option<f64>,
    },
    /// Combine run summaries into per-epoch max/min/mean curves.
    Aggregate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Summary files; defaults to every run summary in the output directory.
        summaries: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
