use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

pub const SEED_ENV: &str = "OBMREG_SEED";

#[derive(Debug, Parser)]
#[command(name = "obmreg", version, about = "Unsupervised partial point-cloud registration")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug). Logs go to stderr.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/val/test dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model on a manifest's train split.
    Train(TrainArgs),
    /// Register one source cloud onto one target cloud.
    Register(RegisterArgs),
    /// Score a checkpoint (and optionally ICP) on a manifest split.
    Bench(BenchArgs),
    /// Train and score the standard component and loss ablations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated shape kinds, cycled over pairs.
    #[arg(long, default_value = "composite")]
    pub shapes: String,
    /// Number of training pairs.
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value_t = 20)]
    pub val_pairs: usize,
    #[arg(long, default_value_t = 50)]
    pub test_pairs: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 0.7)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Maximum rotation angle in degrees.
    #[arg(long, default_value_t = 45.0)]
    pub rot_max: f64,
    #[arg(long, default_value_t = 0.5)]
    pub trans_max: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for checkpoints and the metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// `key=value` run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated epochs at which the learning rate decays.
    #[arg(long)]
    pub decay_epochs: Option<String>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint; only --epochs may change its config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are done, keeping the full schedule.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Refinement passes.
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
    /// Write the aligned source cloud here as PLY.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
    /// Baseline method to score alongside the model: `icp` or `none`.
    #[arg(long, default_value = "icp")]
    pub baseline: String,
    /// Directory for bench.csv and bench.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Record per-pair wall-clock time (makes outputs non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for ablation.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
    /// Comma-separated subset of variant labels (default: all).
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}
