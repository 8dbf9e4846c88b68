use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "tgcnet",
    version,
    about = "Train and inspect communicating multi-agent Q-learners"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file, writing metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint and report success with a 95% interval.
    Eval(EvalArgs),
    /// Dump per-step communication graphs from a checkpoint.
    Trace(TraceArgs),
    /// Aggregate final results of several metric files per variant.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// tgcnet, tgcnet_fc, tgcnet_qmix or no_comm.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    /// Act with ε = 0 instead of the checkpoint's exploration rate.
    #[arg(long)]
    pub greedy: bool,
    /// Seed for the evaluation episodes; defaults to the checkpoint's test stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Reject the checkpoint unless it was trained under this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// metrics.jsonl files, one per run.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    /// Also write the summary lines here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
