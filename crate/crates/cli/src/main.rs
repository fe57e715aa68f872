//! `esdllm` command-line tool.
//!
//! Exit codes: 0 on success, 1 on a runtime or input error, 2 on a usage
//! error (from argument parsing), 3 when a declared equivalence check fails.

mod commands;
mod manifest;
mod options;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "esdllm", version, about = "Diffusion LM decoding with early skipping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a toy model weight file from a seed.
    InitModel(commands::init_model::Args),
    /// Run one generation session and write its trace.
    Generate(commands::generate::Args),
    /// Re-run a generation from its manifest.
    Replay(commands::generate::ReplayArgs),
    /// Run several configurations on one prompt and compare them.
    Compare(commands::compare::Args),
    /// Compute variation, correlation and FLOP statistics from traces.
    Analyze(commands::analyze::Args),
}

pub enum Outcome {
    Ok,
    EquivalenceFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::InitModel(a) => commands::init_model::run(a),
        Command::Generate(a) => commands::generate::run(a),
        Command::Replay(a) => commands::generate::replay(a),
        Command::Compare(a) => commands::compare::run(a),
        Command::Analyze(a) => commands::analyze::run(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::EquivalenceFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
