//! `patchlens` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing::error;
use tracing_subscriber::EnvFilter;

use commands::{
    BiasSplitArgs, BuildDatasetArgs, DecodeArgs, EvaluateArgs, GenToyArgs, SelectLayerArgs,
    StatsArgs,
};

/// Bad arguments or config values; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser)]
#[command(name = "patchlens", version, about = "Patching, recalibrated decoding and bias analysis on small transformers")]
struct Cli {
    /// TOML file with one table per subcommand; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy model, optionally with a planted bias.
    GenToy(GenToyArgs),
    /// Build the dataset from a corpus and the relation entries.
    BuildDataset(BuildDatasetArgs),
    /// Split datapoints into biased and nonbiased subsets with a model.
    BiasSplit(BiasSplitArgs),
    /// Score layers and pick the patching layer.
    SelectLayer(SelectLayerArgs),
    /// Decode a single patched prompt.
    Decode(DecodeArgs),
    /// Run methods over a dataset and write success rates.
    Evaluate(EvaluateArgs),
    /// Logistic, rank and isotonic analyses of split datasets and results.
    Stats(StatsArgs),
}

fn init_logging() {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(UsageError("--jobs must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let file = cli.config.as_deref();
    match cli.command {
        Command::GenToy(a) => commands::gen_toy(&config::merge(&a, file, "gen-toy")?),
        Command::BuildDataset(a) => {
            commands::build_dataset(&config::merge(&a, file, "build-dataset")?)
        }
        Command::BiasSplit(a) => commands::bias_split(&config::merge(&a, file, "bias-split")?),
        Command::SelectLayer(a) => {
            commands::select_layer(&config::merge(&a, file, "select-layer")?)
        }
        Command::Decode(a) => commands::decode(&config::merge(&a, file, "decode")?),
        Command::Evaluate(a) => commands::evaluate(&config::merge(&a, file, "evaluate")?),
        Command::Stats(a) => commands::stats(&config::merge(&a, file, "stats")?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            error!(error = format!("{e:#}"), "command failed");
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
