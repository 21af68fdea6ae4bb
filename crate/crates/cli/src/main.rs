//! `beable`: run packaged beable-trajectory experiments from a JSON config.
//!
//! Exit codes: 0 success, 1 failed verification, 2 configuration error,
//! 3 runtime error.

mod config;
mod output;
mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;

pub const THREADS_ENV: &str = "BEABLE_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(field: impl AsRef<str>, reason: impl AsRef<str>) -> Self {
        CliError::Config(format!("`{}`: {}", field.as_ref(), reason.as_ref()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "beable", version, about = "Stochastic beable trajectories for spin experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories and write probabilities, trajectories and a summary.
    Run {
        config: PathBuf,
        /// Run a single stage (EPRB: 1 or 2). Without it all stages run chained.
        #[arg(long)]
        stage: Option<usize>,
        /// Overrides `ensemble.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `ensemble.n`.
        #[arg(long)]
        n: Option<usize>,
        /// Overrides `output.directory`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check unitarity, normalization and jump consistency without sampling.
    Verify { config: PathBuf },
}

fn threads_override() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::config(THREADS_ENV, format!("must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn run(config: PathBuf, stage: Option<usize>, seed: Option<u64>, n: Option<usize>, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&config)?;
    if let Some(seed) = seed {
        cfg.ensemble.seed = seed;
    }
    if let Some(n) = n {
        cfg.ensemble.n = n;
    }
    if let Some(out) = out {
        cfg.output.directory = out;
    }
    if let Some(threads) = threads_override()? {
        cfg.ensemble.workers = threads;
    }
    cfg.validate()?;
    let stages = run::execute(&cfg, stage)?;
    output::write_all(&cfg.output.directory, &cfg, stage, &stages)?;
    for s in &stages {
        log::info!(
            "stage {}: {} trajectories, {} halved steps",
            s.stage,
            s.run.stats.n_trajectories,
            s.run.counters.halved_steps
        );
    }
    println!("wrote results to {}", cfg.output.directory.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            stage,
            seed,
            n,
            out,
        } => run(config, stage, seed, n, out).map(|()| ExitCode::SUCCESS),
        Command::Verify { config } => RunConfig::load(&config)
            .and_then(|cfg| verify::verify(&cfg))
            .map(|report| {
                println!("{report}");
                if report.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
