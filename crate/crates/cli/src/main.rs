//! `sleep-replay`: train, sleep, evaluate and run experiment families.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sleep_replay::data::DatasetId;
use sleep_replay::harness::Family;
use sleep_replay::nn::InitScheme;

#[derive(Debug, Parser)]
#[command(name = "sleep-replay", version, about = "Sleep replay consolidation for dense classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Config file with [train], [finetune], [sleep], [experiment] and [ga] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding mnist/ and fmnist/ IDX files.
    #[arg(long, global = true, env = "SLEEP_REPLAY_DATA")]
    pub data_root: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on a balanced subset.
    Train(TrainArgs),
    /// Run the sleep phase on a trained network.
    Sleep(SleepArgs),
    /// Evaluate a network on the test split.
    Eval(EvalArgs),
    /// Run an experiment family over trials and conditions.
    Experiment(ExperimentArgs),
    /// Search sleep hyperparameters with a genetic algorithm.
    Tune(TuneArgs),
    /// Turn a report or sleep summary into plot-ready CSV files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "mnist")]
    pub dataset: DatasetId,
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub init: Option<InitScheme>,
}

#[derive(Debug, Args)]
pub struct SleepArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub model_dir: PathBuf,
    /// Record every spike for the raster file.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub raster: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model snapshot file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "mnist")]
    pub dataset: DatasetId,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub dataset: Option<DatasetId>,
    /// Comma-separated fractions (Task 1 and Task 2 for the continual family).
    #[arg(long, value_delimiter = ',')]
    pub fraction: Option<Vec<f64>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Maximum concurrent trial cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long, default_value = "mnist")]
    pub dataset: DatasetId,
    #[arg(long, default_value_t = 0.03)]
    pub fraction: f64,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Worker threads for fitness evaluation.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` from `experiment` or `trace_summary.json` from `sleep`.
    #[arg(long)]
    pub input: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
