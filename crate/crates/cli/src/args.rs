use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "gsnet", version, about = "Open-vocabulary segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Model configuration shared by the commands that build a network.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML model config; built-in toy defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` config override with dotted keys, e.g. `train.lr_head=1e-3`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a manifest and write a checkpoint plus loss log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sets both the initialization and the batch-sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Embedding file (`{"dim", "vectors"}`) instead of hashed prompts.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Segment one image for a comma-separated class list.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// mIoU of a checkpoint on one or more manifests.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Class names left out of the mean.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        #[arg(long, default_value = "gsnet")]
        method: String,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Pixel shares, segment sizes and centroids of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Union of several manifests into one vocabulary.
    Merge {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "merged")]
        name: String,
        /// Names collapsed into the unlabeled value.
        #[arg(long, value_delimiter = ',')]
        background: Option<Vec<String>>,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hausdorff distance between two embedding files.
    Simcheck { a: PathBuf, b: PathBuf },
    /// Write a seeded synthetic corpus with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "background,building,road,tree")]
        classes: Vec<String>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        name: String,
    },
}
