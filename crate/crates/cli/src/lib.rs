//! Command-line experiments: corpus synthesis, training, evaluation,
//! ablation, iteration traces, gradient checks and cost counts.

pub mod commands;
pub mod config;
pub mod record;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::execute;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "binet", version, about = "Bottleneck iterative audio-visual source separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus into --out.
    SynthData(Common),
    /// Train a model; writes checkpoints and train_log.csv.
    Train(TrainArgs),
    /// Score a checkpoint (or the unprocessed mixture) on a split.
    Eval(EvalArgs),
    /// Train and score every configured variant for every configured seed.
    Ablate(AblateArgs),
    /// Per-iteration SI-SDRi and mask dumps.
    Trace(TraceArgs),
    /// Finite-difference check of every primitive and the end-to-end loss.
    GradCheck(ModelArgs),
    /// Print parameter and multiply-accumulate counts.
    Count(ModelArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Key-value config file, or a previous run.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub common: Common,
    /// Architecture variant (full, no_bottleneck, no_c, no_cA, no_cV).
    #[arg(long)]
    pub variant: Option<binet_core::Variant>,
    /// Number of fusion iterations R.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Resume from the checkpoints in this run directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: binet_core::data::Split,
    /// Score the mixture itself as every speaker's estimate.
    #[arg(long)]
    pub mixture: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Restrict to one variant.
    #[arg(long)]
    pub variant: Option<binet_core::Variant>,
    /// Number of fusion iterations R.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Split the trained models are scored on.
    #[arg(long, default_value = "test")]
    pub split: binet_core::data::Split,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Parameters to load; an untrained model is traced without one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: binet_core::data::Split,
}

/// Bad flags, config values or output locations (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A check the command exists to perform did not hold (exit code 1).
#[derive(Debug)]
pub struct ValidationFailure(pub String);

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailure {}

/// 1 for validation failures and non-finite training loss, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ValidationFailure>() {
            return 1;
        }
        if let Some(binet_core::Error::NonFiniteLoss { .. }) = cause.downcast_ref::<binet_core::Error>() {
            return 1;
        }
    }
    2
}
