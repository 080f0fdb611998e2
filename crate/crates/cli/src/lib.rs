//! Command-line driver: binds run files to the pipeline, episode, analysis,
//! and selfcheck operations, and writes a deterministic manifest beside every
//! command's outputs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error (also
//! used by argument parsing), 3 selftest battery failure. The `DCAP_THREADS`
//! environment variable caps evaluation workers (default 1); results are
//! identical for any worker count.

use std::error::Error;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod manifest;

#[derive(Debug)]
pub enum CliError {
    /// Bad run file, override, or setting; nothing was executed. Exit 2.
    Config { detail: String },
    /// The command itself failed. Exit 1.
    Runtime { detail: String },
    /// A selftest battery reported failing items. Exit 3.
    Selftest { detail: String },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { detail } => write!(f, "configuration: {detail}"),
            CliError::Runtime { detail } => write!(f, "{detail}"),
            CliError::Selftest { detail } => write!(f, "selftest: {detail}"),
        }
    }
}

impl Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime { .. } => 1,
            CliError::Selftest { .. } => 3,
        }
    }
}

impl From<dcap_core::pipeline::PipelineError> for CliError {
    fn from(e: dcap_core::pipeline::PipelineError) -> Self {
        match e {
            dcap_core::pipeline::PipelineError::Config { detail } => CliError::Config { detail },
            other => CliError::Runtime { detail: other.to_string() },
        }
    }
}

/// Arguments shared by every verb.
#[derive(Args, Clone, Debug)]
pub struct CommonArgs {
    /// Run file; the built-in desk configuration when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one setting, `section.key=value`; repeatable, applied after
    /// the file in the order given.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Parser, Debug)]
#[command(
    name = "dcap",
    version,
    about = "Few-shot classification by dense pre-training and attentive pooling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic corpus into an image directory.
    #[command(name = "synth-data")]
    SynthData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Stage one: base-class pre-training on the meta-train split.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Stage two: episodic finetuning from a pre-trained checkpoint.
    Metatrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Pre-trained checkpoint to start from; required unless
        /// `run.pretraining = zero`.
        #[arg(long, value_name = "PATH")]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a frozen episode list.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate.
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Split to draw episodes from.
        #[arg(long, default_value = "meta-test", value_name = "SPLIT")]
        split: String,
    },
    /// Run the full pre-training × pooling ablation grid.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the disjoint `[target]` corpus.
    Xdomain {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint trained on the `[dataset]` corpus.
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
    },
    /// Export descriptor-consistency statistics and attention maps.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint whose features are analyzed.
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Meta-test images analyzed (round-robin over classes).
        #[arg(long, default_value_t = 25, value_name = "N")]
        images: usize,
        /// Attention maps exported (attentive-pooling checkpoints only).
        #[arg(long, default_value_t = 4, value_name = "N")]
        attention: usize,
    },
    /// Run the gradient and episode-protocol batteries.
    Selftest {
        #[command(flatten)]
        common: CommonArgs,
        /// Episode count for the protocol battery.
        #[arg(long, default_value_t = 1000, value_name = "N")]
        episodes: usize,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    commands::dispatch(cli)
}
