use clap::{Parser, Subcommand};
use lmm_cli::commands::{run_fit, run_infer, run_simulate, FitArgs, InferArgs, SimulateArgs};
use std::process::ExitCode;

/// Linear mixed models: variance-component estimation and small-sample
/// inference on estimable contrasts.
#[derive(Parser)]
#[command(name = "lmm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit variance components to tabular data.
    Fit(FitArgs),
    /// Test and interval-estimate contrasts against a fit artifact.
    Infer(InferArgs),
    /// Generate a dataset from known parameters.
    Simulate(SimulateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Infer(args) => run_infer(args),
        Command::Simulate(args) => run_simulate(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
