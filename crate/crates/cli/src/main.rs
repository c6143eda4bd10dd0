use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ebsde_core::Error;

mod commands;
mod lock;

#[derive(Parser)]
#[command(name = "ebsde-lab", version, about = "Ergodic BSDE experiments driven by a TOML configuration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the forward model and the Hamiltonian against their structural assumptions.
    Validate(Common),
    /// Run the vanishing-discount pipeline and write the solution artifacts.
    Solve(Common),
    /// Run the evaluation suite against a stored solution.
    Verify(Common),
    /// Solve the one-dimensional HJB equation on a grid.
    Oracle(Common),
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (solution directory for `verify`); defaults to `outputs.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Size of the worker thread pool.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Verdict of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidModel(_) | Error::Io(_) | Error::Basis(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Validate(c) | Command::Solve(c) | Command::Verify(c) | Command::Oracle(c) => c.clone(),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Validate(c) => commands::validate(&c),
        Command::Solve(c) => commands::solve(&c),
        Command::Verify(c) => commands::verify(&c),
        Command::Oracle(c) => commands::oracle(&c),
    };
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
