//! `dynroute`: generate instances, train, evaluate, compare solvers and
//! plot routes.
//!
//! Every subcommand accepts `--config file.toml`; flags override file
//! values and `--set key.path=value` overrides anything. Exit codes: 0 on
//! success, 1 when the run itself fails, 2 for bad flags or config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dynroute", version, about = "Learned construction heuristics for dynamic routing")]
struct Cli {
    /// Log filter, as in RUST_LOG.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded set of instances.
    Gen(GenArgs),
    /// Train a full-information policy.
    Train(TrainArgs),
    /// Train a real-time policy.
    RtTrain(TrainArgs),
    /// Solve an instance file with one solver.
    Eval(EvalArgs),
    /// Compare several solvers on the same instances.
    Compare(CompareArgs),
    /// Draw a route as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct Common {
    /// TOML file with the subcommand's settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any setting, e.g. `--set encoder.hidden_dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// `tsp` or `vrp`.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub delta_max: Option<f64>,
    #[arg(long)]
    pub capacity: Option<u32>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub delta_max: Option<f64>,
    #[arg(long)]
    pub capacity: Option<u32>,
    /// `temporal`, `first_slice` or `sum`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub instances_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub validation_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub keep_checkpoints: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// `greedy`, `beam:K`, `sample:M` or `rt`.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// Comma list, e.g. `greedy,beam:10,nn,dp`.
    #[arg(long)]
    pub solvers: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint used by the `rt` solver.
    #[arg(long)]
    pub rt_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads per solver.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub instance: Option<PathBuf>,
    /// Record of the instance file to draw.
    #[arg(long)]
    pub index: Option<usize>,
    /// NDJSON of solutions, one per instance, or of bare orders.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    /// Record of the solution file; defaults to `--index`.
    #[arg(long)]
    pub solution_index: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// How a command failed.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub trait UsageExt<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a, false),
        Command::RtTrain(a) => commands::train(a, true),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
