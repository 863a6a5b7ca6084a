//! Command-line driver for normality normalization experiments.

mod commands;
mod config;
mod source;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunConfig, UsageError};

const THREADS_ENV: &str = "NORMALNORM_THREADS";

#[derive(Parser)]
#[command(name = "normalnorm", version, about = "Normality normalization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    opts: RunConfig,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// One-step λ estimate for each column of a CSV.
    FitLambda,
    /// Power-transform the columns of a CSV (or undo it with --inverse).
    Gaussianize,
    /// Train an MLP; writes a log, a checkpoint and the resolved config.
    Train,
    /// Normality and dependence diagnostics of a checkpoint's layers.
    Diagnose,
    /// Noise robustness of a checkpoint's layers.
    Robustness,
    /// Forward-pass timing of normality vs conventional normalization.
    Bench,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<normalnorm::Error>() {
            return match e {
                normalnorm::Error::Config(_) => 2,
                e if e.is_numerical() => 4,
                _ => 3,
            };
        }
    }
    3
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| UsageError(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let cfg = RunConfig::resolve(cli.opts)?;
    match cli.command {
        Command::FitLambda => commands::fit_lambda(cfg),
        Command::Gaussianize => commands::gaussianize(cfg),
        Command::Train => commands::train_cmd(cfg),
        Command::Diagnose => commands::diagnose_cmd(cfg),
        Command::Robustness => commands::robustness_cmd(cfg),
        Command::Bench => commands::bench_cmd(cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
