//! `symode`: simulate data, train, audit symmetries, check gradients and
//! compare regularized against plain training.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "symode", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML (or `.json`) configuration file with flat dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate,
    /// Identify (theta1, theta2) from `data.path`.
    Train,
    /// Evaluate determining equations and the epsilon scaling of the conservation residual.
    AuditSymmetry,
    /// Compare adjoint and finite-difference gradients on `data.path`.
    GradCheck,
    /// Train with and without the symmetry regularizers over several datasets.
    Compare,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::AuditSymmetry => "audit-symmetry",
            Command::GradCheck => "grad-check",
            Command::Compare => "compare",
        }
    }
}

fn execute(cli: &Cli) -> Result<u8, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let body = match cli.command {
        Command::Simulate => commands::simulate,
        Command::Train => commands::train_cmd,
        Command::AuditSymmetry => commands::audit_symmetry,
        Command::GradCheck => commands::grad_check,
        Command::Compare => commands::compare,
    };
    commands::run(cli.command.name(), &cfg, &out, body)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::EXIT_INPUT } else { error::EXIT_OK });
        }
    };
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("symode {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
