use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "edgeflow", version, about = "Blind harmonization of 3D volumes with an edge-conditioned rectified flow")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master seed; replaces every per-module seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Defaults to start from before the config file is applied.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,

    /// Overrides one config field, e.g. `--set flow.train.steps=500`. The value
    /// is parsed as JSON, falling back to a plain string.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,

    /// Run directory for config.json, outputs, metrics.json and log.txt.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Desk32,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generates a traveling-phantom corpus into `<out>/corpus`.
    Phantom,
    /// Adaptive Canny edge map of one volume, written to `<out>/edges.hvol`.
    Edge { volume: PathBuf },
    /// Trains the velocity field on the training split of a phantom corpus.
    Train { corpus: PathBuf },
    /// Edge extraction, flow sampling and refinement of a source volume.
    Harmonize { checkpoint: PathBuf, source: PathBuf },
    /// Blind image-level baselines against target reference volumes.
    Baseline {
        #[arg(value_enum)]
        method: BaselineMethod,
        source: PathBuf,
        /// Target-domain reference volume; repeat for several.
        #[arg(long = "target", required = true)]
        targets: Vec<PathBuf>,
    },
    /// Image metrics of a prediction against ground truth.
    Eval {
        prediction: PathBuf,
        truth: PathBuf,
        /// Ascending intensity cuts; adds Dice per threshold class.
        #[arg(long, value_delimiter = ',')]
        dice_cuts: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Histmatch,
    Ssimh,
}
