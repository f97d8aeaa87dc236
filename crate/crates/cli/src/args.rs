use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gatedunipose::Precision;

#[derive(Debug, Parser)]
#[command(name = "gatedunipose", version, about = "Pose-estimation verification, toy training and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Model TOML, or a run TOML with a `[model]` table.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the seeds found in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true, default_value = "f32")]
    pub precision: Precision,

    /// Worker threads for parallel kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Where manifests, reports and checkpoints go.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every invariant suite and print a pass/fail table.
    Verify,
    /// Train the toy model on synthetic data.
    TrainToy(TrainArgs),
    /// Score a prediction file against an annotation file.
    Eval(EvalArgs),
    /// Per-module and total parameter counts.
    Params(ParamsArgs),
    /// Merge re-parameterizable branches of a checkpoint.
    Deploy(DeployArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::TrainToy(_) => "train-toy",
            Command::Eval(_) => "eval",
            Command::Params(_) => "params",
            Command::Deploy(_) => "deploy",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Total optimizer steps, overriding `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,

    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Ap,
    Pckh,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,

    #[arg(long)]
    pub ann: PathBuf,

    #[arg(long, value_enum, default_value = "ap")]
    pub metric: MetricArg,

    /// PCKh threshold as a fraction of the head segment.
    #[arg(long, default_value_t = 0.5)]
    pub pckh_fraction: f64,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Built-in configuration, instead of `--config`.
    #[arg(long, value_parser = ["toy", "full"])]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct DeployArgs {
    #[arg(long)]
    pub input: PathBuf,

    #[arg(long)]
    pub output: PathBuf,

    /// Random inputs used to compare the merged model with the original.
    #[arg(long, default_value_t = 10)]
    pub inputs: usize,
}
