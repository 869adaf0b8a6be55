//! Command-line front end: ingest tables, prepare training text, build a
//! retrieval index, predict, evaluate and sweep.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use rowcast_core::backend::BackendKind;
use tracing_subscriber::EnvFilter;

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "rowcast", version, about = "Tabular prediction by retrieval and text completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for embedding, prediction and dataset evaluation
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// http, mock_knn or mock_echo
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendKind>,

    /// Retrieved exemplars per query
    #[arg(long, global = true)]
    k: Option<usize>,

    #[arg(long, global = true)]
    token_budget: Option<usize>,

    /// Output directory
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Infer the schema and write canonical cells
    Ingest,
    /// Build training examples from a directory of tables
    PrepareTrain,
    /// Embed the training table and save the retrieval index
    Index,
    /// Predict the test split
    Predict,
    /// Score every configured dataset once
    Evaluate,
    /// Run the configured train-subset or context-size sweep
    Sweep,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown backend {s:?}, expected http, mock_knn or mock_echo"))
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        workers: cli.workers,
        seed: cli.seed,
        backend: cli.backend,
        k: cli.k,
        token_budget: cli.token_budget,
        output: cli.output.clone(),
    });
    cfg.validate()?;
    // a second init (as in tests) is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();

    match cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::PrepareTrain => commands::prepare_train(&cfg),
        Command::Index => commands::index(&cfg),
        Command::Predict => commands::predict(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Sweep => commands::sweep(&cfg),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, body) = error::report(&err);
            eprintln!("{body}");
            ExitCode::from(code as u8)
        }
    }
}
