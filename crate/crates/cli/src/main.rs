mod commands;
mod config;
mod failure;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::failure::{io_error, CliError};

/// Nonparametric regression with covariates measured with error.
#[derive(Parser)]
#[command(name = "nnme", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario dataset plus its truth.
    Simulate(Args),
    /// Fit one method and score it on the evaluation grid.
    Fit(Args),
    /// Posterior-mean predictions, bootstrap bands and prediction error.
    Evaluate(Args),
    /// Cross-validate a grid of training settings.
    Cv(Args),
    /// Scenario × method × repetition ISE table.
    Benchmark(Args),
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, replaced atomically.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scenario name (comma-separated list for `benchmark`).
    #[arg(long)]
    pub scenario: Option<String>,
    /// Dataset CSV instead of a scenario.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// nnme, nn, mjl, vae, ga, kile or kale (comma-separated list for `benchmark`).
    #[arg(long)]
    pub method: Option<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Benchmark repetitions.
    #[arg(long)]
    pub reps: Option<usize>,
    /// A `fit.json` to evaluate instead of refitting.
    #[arg(long)]
    pub fit: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, args) = match cli.command {
        Command::Simulate(a) => ("simulate", a),
        Command::Fit(a) => ("fit", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Cv(a) => ("cv", a),
        Command::Benchmark(a) => ("benchmark", a),
    };
    if args.jobs == 0 {
        return Err(failure::config_error("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build_global()
        .map_err(|e| failure::config_error(format!("thread pool: {e}")))?;
    let config_text = match &args.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| io_error(p, e))?),
        None => None,
    };
    let ctx = commands::Context::new(name, args, config_text)?;
    match name {
        "simulate" => commands::simulate(&ctx),
        "fit" => commands::fit(&ctx),
        "evaluate" => commands::evaluate(&ctx),
        "cv" => commands::cv(&ctx),
        _ => commands::benchmark(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
