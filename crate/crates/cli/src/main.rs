//! Command-line pipeline: build / reduce / certify / simulate / report from
//! a single scenario configuration file.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use retherm_core::Error;

/// Reticle-heating prediction experiments.
#[derive(Parser)]
#[command(name = "retherm", version, about)]
struct Cli {
    /// Scenario configuration file (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Replace existing outputs instead of refusing to touch them.
    #[arg(long, global = true)]
    overwrite: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reduce each regime of the plant and write the centered model family
    /// plus a moment-match report.
    Reduce,
    /// Run the small-gain certification of the closed loop and write the
    /// certificate. Exits nonzero when certification fails.
    Certify,
    /// Run the lot-level scenario and write trace, metrics, throughput and
    /// summary files. Requires a passing certificate unless --force.
    Simulate {
        /// Proceed without a (passing) certificate; flagged in the summary.
        #[arg(long)]
        force: bool,
    },
    /// Summarize the result files of a previous simulate run.
    Report,
}

/// Exit codes: 0 ok, 1 validation, 2 certification failure, 3 runtime.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Dimension(_)
        | Error::Parse { .. }
        | Error::EmptyLayout
        | Error::Undetectable(_) => 1,
        Error::CertificationFailed(_) => 2,
        // assumption violations and numeric/io breakage are runtime errors;
        // the message distinguishes them
        Error::AssumptionViolated(_)
        | Error::UnstableDelta(_)
        | Error::ExpansionOnSpectrum
        | Error::NormInfinite
        | Error::Numerical(_)
        | Error::Io { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = match commands::Context::from_cli(&cli) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };
    let result = match &cli.command {
        Command::Reduce => commands::reduce(&ctx),
        Command::Certify => commands::certify(&ctx),
        Command::Simulate { force } => commands::simulate(&ctx, *force),
        Command::Report => commands::report(&ctx),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
