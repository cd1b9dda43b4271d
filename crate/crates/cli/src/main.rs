//! `snell` — batch CLI for the reflected-BSDE optimal stopping engine.
//!
//! Commands: `solve`, `oracle`, `price`, `verify`. Exit codes: 0 success,
//! 1 numerical/verification failure, 2 invalid input. Errors are emitted as
//! machine-readable JSON on stderr.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "snell", version, about = "Optimal stopping under non-linear expectations on a Brownian-Poisson lattice")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for randomized suites and generator obstacles (overrides the
    /// config seed). Defaults to 42.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides the config output dir). Defaults to
    /// `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Which artefacts to write.
    #[arg(long, global = true, value_parser = ["csv", "json", "both"])]
    format: Option<String>,

    /// Layer-parallel execution (output is byte-identical either way).
    #[arg(long, global = true, value_parser = ["on", "off"])]
    parallel: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the reflected equation and export the solution table.
    Solve,
    /// Exhaust stopping rules and report the gap to the solver value.
    Oracle {
        /// Test hook: bias added to the solver value before gap reporting.
        #[arg(long, hide = true)]
        corrupt_solver: Option<f64>,
    },
    /// Price an American option and extract the superhedging strategy.
    Price,
    /// Run named verification suites.
    Verify {
        /// Comma-separated suite names (defaults to the config's checks, or
        /// every suite).
        #[arg(long, value_delimiter = ',')]
        checks: Vec<String>,
    },
}

/// A command failure carrying the exit code and the stderr JSON payload.
pub struct Failure {
    pub exit: u8,
    pub code: String,
    pub message: String,
}

impl From<snell_core::Error> for Failure {
    fn from(err: snell_core::Error) -> Failure {
        Failure {
            exit: if err.is_validation() { 2 } else { 1 },
            code: err.code().to_string(),
            message: err.to_string(),
        }
    }
}

impl Failure {
    pub fn invalid(code: &str, message: impl Into<String>) -> Failure {
        Failure { exit: 2, code: code.to_string(), message: message.into() }
    }

    pub fn numerical(code: &str, message: impl Into<String>) -> Failure {
        Failure { exit: 1, code: code.to_string(), message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    snell_core::parallel::set_parallel(cli.parallel.as_deref() != Some("off"));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let payload = serde_json::json!({
                "error": { "code": failure.code, "message": failure.message }
            });
            eprintln!("{payload}");
            ExitCode::from(failure.exit)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::invalid("INVALID_INPUT", "--config is required"))?;
    let text = std::fs::read_to_string(config_path).map_err(|e| {
        Failure::invalid("INVALID_INPUT", format!("cannot read {}: {e}", config_path.display()))
    })?;
    let config = config::RunConfig::parse(&text)?;
    let ctx = commands::CommandContext::new(config, cli.seed, cli.out, cli.format)?;
    match cli.command {
        Command::Solve => commands::cmd_solve(&ctx),
        Command::Oracle { corrupt_solver } => commands::cmd_oracle(&ctx, corrupt_solver),
        Command::Price => commands::cmd_price(&ctx),
        Command::Verify { checks } => commands::cmd_verify(&ctx, &checks),
    }
}
