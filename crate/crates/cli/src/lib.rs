//! Configuration-driven front end for `lqot-core`.
//!
//! Exit codes: 0 success, 1 failed check or I/O error, 2 configuration
//! error (including command-line usage), 3 incompatible marginals, 4
//! numerical failure.

pub mod checks;
pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] lqot_core::Error),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{failed} check(s) failed")]
    ChecksFailed { failed: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(lqot_core::Error::IncompatibleMarginals { .. }) => 3,
            CliError::Core(_) => 4,
            CliError::Io(_) | CliError::ChecksFailed { .. } => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lqot", version, about = "Optimal transport under linear-quadratic control costs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Controllability report and cost matrices.
    Analyze(Common),
    /// Cost and initial adjoint of each configured pair.
    Cost(Common),
    /// Optimal plan between the configured measures.
    Solve(Common),
    /// Optimal trajectories of the configured pairs as CSV.
    Trajectory(Common),
    /// Oracle cross-validation suite; exits 1 on any failure.
    Check(Common),
    /// Materializes the configured measures as CSV.
    Sample(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Problem configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "lqot-out")]
    pub out: PathBuf,
    /// Replaces the config seed and every per-measure seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tolerance override in [1e-15, 1e-2].
    #[arg(long, value_parser = parse_tol)]
    pub tol: Option<f64>,
}

fn parse_tol(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    config::check_tolerance("--tol", v)
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Analyze(c)
            | Command::Cost(c)
            | Command::Solve(c)
            | Command::Trajectory(c)
            | Command::Check(c)
            | Command::Sample(c) => c,
        }
    }
}

/// Runs one verb and returns its stdout summary.
pub fn run(command: &Command) -> Result<String, CliError> {
    let common = command.common();
    let problem = config::read(&common.config)?.load(common.seed, common.tol)?;
    let out = output::OutputDir::create(&common.out)?;
    match command {
        Command::Analyze(_) => commands::analyze(&problem, &out),
        Command::Cost(_) => commands::cost(&problem, &out),
        Command::Solve(_) => commands::solve(&problem, &out),
        Command::Trajectory(_) => commands::trajectories(&problem, &out),
        Command::Check(_) => checks::check(&problem, &out),
        Command::Sample(_) => commands::sample(&problem, &out),
    }
}
