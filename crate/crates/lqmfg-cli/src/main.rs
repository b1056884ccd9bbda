//! `lqmfg`: command-line driver for the mean-field game laboratory.
//!
//! Exit status: 0 success, 2 bad configuration or input data, 3 solver
//! non-convergence (a diagnostics file is named on stderr), 4 internal
//! invariant breach, 1 I/O failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lqmfg::LqError;

use crate::config::{Overrides, RunConfig};
use crate::output::{Sink, Stamp};

/// Worker-count cap for the parallel Monte Carlo loops.
const THREADS_ENV: &str = "LQMFG_THREADS";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver {
        message: String,
        diagnostics: Option<PathBuf>,
    },
    Internal(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Solver { .. } => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Solver {
                message,
                diagnostics: Some(p),
            } => {
                write!(f, "solver did not converge: {message}; diagnostics in {}", p.display())
            }
            CliError::Solver {
                message,
                diagnostics: None,
            } => write!(f, "solver did not converge: {message}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<LqError> for CliError {
    fn from(e: LqError) -> Self {
        let msg = e.to_string();
        match e {
            LqError::Structural(_) | LqError::Argument(_) | LqError::Admissibility(_) => CliError::Config(msg),
            LqError::NonConvergence { .. } | LqError::Divergence { .. } => CliError::Solver {
                message: msg,
                diagnostics: None,
            },
            LqError::Monotonicity { .. }
            | LqError::Singular { .. }
            | LqError::Positivity { .. }
            | LqError::BlowUp(_)
            | LqError::Regression(_) => CliError::Internal(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lqmfg", version, about = "Partial-information LQ mean-field game laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the model assumptions and report the well-posedness inequality.
    Validate(Common),
    /// Solve the Riccati system and write riccati.csv.
    Riccati(Common),
    /// Simulate filters, controls and one population path under the feedback law.
    Simulate(Common),
    /// Solve the Hamiltonian consistency system by Picard iteration.
    Fbsde(Common),
    /// Measure the epsilon-Nash rates over a grid of population sizes.
    Nash(Common),
    /// Run the inter-bank example end to end.
    ExampleIbl(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; the built-in bank example when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Time step; must divide the horizon.
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "n-paths")]
    n_paths: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Population sizes, comma separated.
    #[arg(long = "N-grid", value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    /// Common-noise control loading of the bank example.
    #[arg(long)]
    dtilde: Option<f64>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
}

type Action = fn(&RunConfig, &Sink) -> Result<(), CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (common, action): (Common, Action) = match cli.command {
        Command::Validate(c) => (c, commands::run_validate),
        Command::Riccati(c) => (c, commands::run_riccati),
        Command::Simulate(c) => (c, commands::run_simulate),
        Command::Fbsde(c) => (c, commands::run_fbsde),
        Command::Nash(c) => (c, commands::run_nash),
        Command::ExampleIbl(c) => (c, commands::run_example_ibl),
    };
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::ibl(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        dt: common.dt,
        steps: common.steps,
        n_paths: common.n_paths,
        reps: common.reps,
        n_grid: common.n_grid,
        d_tilde: common.dtilde,
    })?;
    let stamp = Stamp {
        config_hash: cfg.hash(),
        seed: cfg.monte_carlo.seed,
    };
    let sink = Sink::new(commands::out_dir(common.out, &cfg), stamp)?;
    action(&cfg, &sink)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lqmfg: {e}");
            ExitCode::from(e.code())
        }
    }
}
