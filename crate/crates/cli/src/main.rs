//! `semilab`: run flow, measure, solver, pairing, WKB and check stages
//! from a TOML experiment file and write CSV tables.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use run::Run;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] semilab_core::Error),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("output error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "semilab", version, about = "Semiclassical measures of dissipative Helmholtz solutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment TOML file (required by every subcommand).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Sample the energy shell and trace rays.
    Flow,
    /// Evaluate the measure on each observable.
    Measure,
    /// Solve the Helmholtz problem for every h.
    Solve,
    /// Weyl pairings of the solutions with each observable.
    Pair,
    /// WKB error fit and Hessian asymptotics.
    Wkb,
    /// Hypothesis and consistency checks; exit code 2 on failure.
    Check,
    /// Pairing against the measure across h with fitted orders.
    Converge,
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        semilab_core::par::configure_threads(n).map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let cfg = ExperimentConfig::load(path)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Io(format!("{}: {e}", cli.out.display())))?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let run = Run {
        cfg,
        out: cli.out.clone(),
        seed,
    };
    match cli.command {
        Command::Flow => run.flow(),
        Command::Measure => run.measure(),
        Command::Solve => run.solve_all(),
        Command::Pair => run.pair(),
        Command::Wkb => run.wkb(),
        Command::Check => run.check(),
        Command::Converge => run.converge(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semilab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
