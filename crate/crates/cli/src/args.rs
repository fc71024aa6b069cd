use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ddm", version, about = "Dataset condensation by decomposed distribution matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a condensed set and write it with its loss log.
    Condense(CondenseArgs),
    /// Train fresh networks on a condensed set or coreset and report test accuracy.
    Evaluate(EvaluateArgs),
    /// Texture, style-statistics and style-drift reports.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Cifar10,
    Toy,
}

#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    /// Dataset to load.
    #[arg(long, value_enum, default_value = "toy")]
    pub data: DataKind,

    /// Directory holding data_batch_{1..5}.bin and test_batch.bin (cifar10 only).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,

    /// Toy dataset: number of classes (desk setting).
    #[arg(long, default_value_t = 4)]
    pub toy_classes: usize,

    /// Toy dataset: images generated per class before the 80/20 split (desk setting).
    #[arg(long, default_value_t = 500)]
    pub toy_per_class: usize,

    /// Toy dataset: image side in pixels (desk setting).
    #[arg(long, default_value_t = 16)]
    pub toy_size: usize,

    /// Toy dataset: std of the per-pixel Gaussian noise, raw pixel units (desk setting).
    #[arg(long, default_value_t = 0.3)]
    pub toy_noise: f64,

    /// Toy dataset: generator seed (desk setting).
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Clone, Debug, Args)]
pub struct NetArgs {
    /// Channels per conv block (desk setting; the published ConvNet uses 128).
    #[arg(long, default_value_t = 32)]
    pub width: usize,

    /// Conv blocks; derived from the image size when omitted (3 for 32px, 2 below).
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct CondenseArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub net: NetArgs,

    /// Images per class in the condensed set.
    #[arg(long, default_value_t = 10)]
    pub ipc: usize,

    /// Outer iterations t (desk setting: 2000 for toy, 20000 at CIFAR scale).
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,

    /// Master seed for initialization and every per-iteration draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output condensed file; the loss log goes to <out>.metrics.csv.
    #[arg(long)]
    pub out: PathBuf,

    /// Weight of moments matching within the style loss (published setting).
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,

    /// Weight of the intra-class diversity term (published setting).
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,

    /// Weight of the style loss (published setting).
    #[arg(long, default_value_t = 5000.0)]
    pub lambda: f64,

    /// Nearest neighbours as a fraction of IPC, k = max(1, round(k_frac * ipc)) (published setting).
    #[arg(long, default_value_t = 0.2)]
    pub k_frac: f64,

    /// Comma-separated blocks used for style matching (default: all blocks, published setting).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,

    /// Real images sampled per class each iteration (desk setting).
    #[arg(long, default_value_t = 64)]
    pub real_batch: usize,

    /// Pixel learning rate (published setting).
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,

    /// Pixel momentum (desk setting, lineage convention).
    #[arg(long, default_value_t = 0.5)]
    pub momentum: f64,

    /// Iterations between metrics rows.
    #[arg(long, default_value_t = 10)]
    pub log_interval: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceKind {
    Condensed,
    Random,
    Herding,
}

#[derive(Clone, Debug, Args)]
pub struct ProtocolArgs {
    /// Networks trained per training set (desk setting; published: 20).
    #[arg(long, default_value_t = 3)]
    pub nets: usize,

    /// Training sets drawn per source (desk setting; published: 5).
    #[arg(long, default_value_t = 2)]
    pub repeats: usize,

    /// Training epochs per network (desk setting).
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,

    /// Classifier learning rate (lineage setting).
    #[arg(long, default_value_t = 0.01)]
    pub eval_lr: f64,

    /// Classifier momentum (lineage setting).
    #[arg(long, default_value_t = 0.9)]
    pub eval_momentum: f64,

    /// Classifier weight decay (lineage setting).
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,

    /// Mini-batch size (lineage setting).
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,

    /// Disable flip/translate/brightness augmentation while training.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Clone, Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub net: NetArgs,

    #[command(flatten)]
    pub protocol: ProtocolArgs,

    /// Where the training images come from.
    #[arg(long, value_enum, default_value = "condensed")]
    pub source: SourceKind,

    /// Condensed file (required with --source condensed).
    #[arg(long)]
    pub file: Option<PathBuf>,

    /// Images per class for coreset sources.
    #[arg(long, default_value_t = 10)]
    pub ipc: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output prefix: writes <out>.report.csv and <out>.summary.csv.
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub net: NetArgs,

    /// Condensed file to diagnose (set A).
    #[arg(long)]
    pub file: PathBuf,

    /// Second condensed file (set B); defaults to the real training split.
    #[arg(long)]
    pub against: Option<PathBuf>,

    /// Seed of the random network used for style statistics.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Block whose feature maps give style statistics and receive drift (first block by default).
    #[arg(long, default_value_t = 0)]
    pub layer: usize,

    /// GLCM gray levels (desk setting).
    #[arg(long, default_value_t = 8)]
    pub glcm_levels: usize,

    /// Comma-separated odd GLCM window sizes (published setting).
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5])]
    pub glcm_kernels: Vec<usize>,

    /// Also run the style-drift experiment: a classifier trained on set B is
    /// scored on the test split with its style drifted toward set A.
    #[arg(long)]
    pub drift: bool,

    /// Comma-separated drift ratios in [0, 1].
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0])]
    pub gammas: Vec<f64>,

    /// Epochs for the drift classifier (desk setting).
    #[arg(long, default_value_t = 100)]
    pub drift_epochs: usize,

    /// Output prefix: writes <out>.texture.csv, <out>.style.csv,
    /// <out>.style_gap.csv and, with --drift, <out>.drift.csv.
    #[arg(long, default_value = "diagnose")]
    pub out: PathBuf,
}
