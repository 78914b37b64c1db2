mod commands;
mod config;
mod emit;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Lib(#[from] qtrajgeom::QtError),
}

/// Numerical lab for monitored-qubit trajectory geometry: stochastic
/// ensembles, most-likely paths, geometric-phase topology, and Gaussian
/// corrections, driven by archivable JSON recipes.
#[derive(Parser)]
#[command(name = "qtrajgeom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a top-level config key, e.g. --set tau=0.2
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Output directory (default: $QTRAJGEOM_OUT, else ./out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Shorthand for --set seed=N
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a stochastic trajectory ensemble and its self-closing statistics
    Simulate,
    /// Most-likely-path branches and the optimal geometric phase over latitude
    Optimal,
    /// All transition strengths: equator, open families, jump latitude, corrected
    Transition,
    /// Chern and winding diagnostics of open-trajectory families
    Chern,
    /// Gaussian-corrected branch probability ratios, with optional Monte Carlo
    Corrections,
}

fn run(cli: &Cli) -> Result<usize, CliError> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config FILE is required".into()))?;
    let mut sets = cli.sets.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    let doc = config::load_document(config_path, &sets)?;
    let hash = config::config_hash(&doc);

    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }

    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("QTRAJGEOM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;

    match cli.command {
        Command::Simulate => {
            let cfg: config::SimulateConfig = config::parse(doc.clone())?;
            cfg.validate()?;
            commands::simulate(&cfg, &doc, &hash, &out)
        }
        Command::Optimal => {
            let cfg: config::OptimalConfig = config::parse(doc.clone())?;
            cfg.validate()?;
            commands::optimal(&cfg, &doc, &hash, &out)
        }
        Command::Transition => {
            let cfg: config::TransitionConfig = config::parse(doc.clone())?;
            cfg.validate()?;
            commands::transition(&cfg, &doc, &hash, &out)
        }
        Command::Chern => {
            let cfg: config::ChernConfig = config::parse(doc.clone())?;
            cfg.validate()?;
            commands::chern(&cfg, &doc, &hash, &out)
        }
        Command::Corrections => {
            let cfg: config::CorrectionsConfig = config::parse(doc.clone())?;
            cfg.validate()?;
            commands::corrections(&cfg, &doc, &hash, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} grid point(s) failed; completed rows were written");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
