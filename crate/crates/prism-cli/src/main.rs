//! Operator front end for the shape-field library.
//!
//! Pipeline: `generate` a synthetic dataset → `train` the displacement
//! field → `train-inverse` the amortized time encoder → `infer-time` /
//! `predict` / `ood` for analysis → `validate-fisher` to cross-check the
//! closed-form information against Monte Carlo → `report` for the full CSV
//! + SVG summary.
//!
//! Exit codes: 0 success, 1 usage error, 2 a requested validation ran and
//! failed its tolerance, 3 runtime failure. Logging is controlled by the
//! `PRISM_LOG` environment variable (`error`, `info`, `debug`; default
//! `info`). Commands never modify their inputs; outputs go to `--out-dir`
//! (or the explicit `--out` path for `generate`).

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use prism_cli::commands;
use prism_cli::common::CliError;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "prism",
    version,
    about = "Probabilistic shape fields: synthesis, training, time inference, and validation"
)]
struct Cli {
    /// Cap the worker-thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic star-shape dataset.
    Generate(commands::generate::GenerateArgs),
    /// Train the displacement field on a dataset.
    Train(commands::train::TrainArgs),
    /// Train the inverse time encoder against a trained field.
    TrainInverse(commands::train_inverse::TrainInverseArgs),
    /// Estimate per-observation intrinsic time on a dataset.
    InferTime(commands::infer_time::InferTimeArgs),
    /// Predict follow-up shapes from each subject's earliest observation.
    Predict(commands::predict::PredictArgs),
    /// Score a dataset against a lagged synthetic copy and report AUC.
    Ood(commands::ood::OodArgs),
    /// Cross-check closed-form information against Monte Carlo (exit 2 on
    /// tolerance failure).
    ValidateFisher(commands::validate_fisher::ValidateFisherArgs),
    /// Emit the full experiment summary: CSV tables and SVG figures.
    Report(commands::report::ReportArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRISM_LOG", "info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Validation(m)) => {
            eprintln!("validation failed: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate(args) => commands::generate::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::TrainInverse(args) => commands::train_inverse::run(args),
        Command::InferTime(args) => commands::infer_time::run(args),
        Command::Predict(args) => commands::predict::run(args),
        Command::Ood(args) => commands::ood::run(args),
        Command::ValidateFisher(args) => commands::validate_fisher::run(args),
        Command::Report(args) => commands::report::run(args),
    }
}
