//! `patchwipe`: train, unlearn, retrain, evaluate and summarize.

mod commands;
mod data_source;
mod manifest;
mod selection;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    /// Artifacts were written but the request did not reach its degree.
    NotConverged,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::NotConverged => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
            CliError::NotConverged => write!(f, "unlearning did not reach the requested degree"),
        }
    }
}

impl From<patchwipe::Error> for CliError {
    fn from(e: patchwipe::Error) -> Self {
        use patchwipe::Error as E;
        match e {
            E::InvalidRequest(_) | E::InvalidParameter(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "patchwipe", version, about = "Certified patch-based unlearning for ReLU classifiers")]
struct Cli {
    /// Run every batch operation on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an MLP and write a model file.
    Train(TrainArgs),
    /// Patch a model so it forgets selected training points.
    Unlearn(UnlearnArgs),
    /// Retrain from scratch without selected points (baseline).
    Retrain(RetrainArgs),
    /// Compare two models on a dataset.
    Eval(EvalArgs),
    /// Collect unlearning reports into tables and plot data.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// blobs[:k=v,...], idx:dir=PATH or csv:train=PATH[,test=PATH][,label=COL][,header=true]
    #[arg(long)]
    pub data: String,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 16])]
    pub arch: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Single,
    Multi,
    Class,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfusionArg {
    ConstantShift,
    FullAffine,
}

#[derive(Debug, Args, Serialize)]
pub struct UnlearnArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Training data of the model (same syntax as `train --data`).
    #[arg(long)]
    pub data: String,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// random:N, ids:FILE or class:C
    #[arg(long)]
    pub select: String,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 0.9)]
    pub delta: f64,
    #[arg(long, default_value_t = patchwipe::patching::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = patchwipe::patching::DEFAULT_MARGIN)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub max_iterations: usize,
    #[arg(long, value_enum, default_value_t = ConfusionArg::ConstantShift)]
    pub confusion: ConfusionArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrainArgs {
    /// Manifest written by `train`.
    #[arg(long)]
    pub model_config: PathBuf,
    /// random:N, ids:FILE or class:C
    #[arg(long)]
    pub drop: String,
    /// Seed for `random:N` drops.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
    #[arg(long)]
    pub data: String,
    /// The unlearned points (random:N, ids:FILE or class:C).
    #[arg(long)]
    pub unlearned: Option<String>,
    /// Seed for `random:N`, matching the one given to `unlearn`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add the loss-threshold membership audit on the unlearned points.
    #[arg(long)]
    pub mia: bool,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Unlearning reports written by `unlearn --report`.
    #[arg(long = "in", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub plot_data: PathBuf,
    /// Timings written by `retrain`, for retrain-normalized run times.
    #[arg(long)]
    pub retrain_timings: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let exec = if cli.sequential {
        patchwipe::par::Execution::Sequential
    } else {
        patchwipe::par::Execution::Parallel
    };
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Unlearn(a) => commands::unlearn(a, exec),
        Command::Retrain(a) => commands::retrain(a),
        Command::Eval(a) => commands::eval(a, exec),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
