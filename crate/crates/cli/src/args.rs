use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use contour_saliency::model::ModelConfig;
use contour_saliency::trainer::Ablation;

pub const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (checkpoint format 1)"
);

/// Boundary-aware salient object segmentation on synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "csal", version, long_version = LONG_VERSION, args_override_self = true)]
pub struct Cli {
    /// Worker threads for data generation and evaluation (results do not
    /// depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of image/mask pairs.
    GenData(GenData),
    /// Train a network and record its history.
    Train(Train),
    /// Score saliency maps on disk against ground-truth masks.
    Eval(Eval),
    /// Write saliency maps for a dataset split or a single image.
    Infer(Infer),
    /// Contour weight map of a mask.
    Weightmap(Weightmap),
    /// Write the per-level attention maps of a trained network.
    Attn(Attn),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradCheck),
}

/// Flags every subcommand shares.
#[derive(Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a nonempty output directory.
    #[arg(long)]
    pub force: bool,
    /// File of `key=value` lines supplying defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub count: usize,
    /// Scenes held out for testing; defaults to a sixth of `count`.
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long, default_value_t = 72)]
    pub base_size: usize,
    #[arg(long, default_value_t = 64)]
    pub crop_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Desk,
    Tiny,
    Full,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Toy => ModelConfig::toy(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Full => ModelConfig::full(),
        }
    }
}

#[derive(Debug, Args)]
pub struct Train {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub model: Preset,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.05)]
    pub encoder_lr_scale: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub lr_step_epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay: f64,
    /// Multiply the learning rate by 0.05 every step interval instead
    /// (overrides --lr-decay).
    #[arg(long)]
    pub steep_lr_decay: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = Ablation::BCH, value_parser = parse_ablation)]
    pub ablation: Ablation,
    /// Comma-separated output weights, coarsest first; default picks the
    /// finest entries of 0.3,0.4,0.6,0.8,1.
    #[arg(long, value_delimiter = ',')]
    pub loss_weights: Option<Vec<f64>>,
    /// Weight of the guided prediction.
    #[arg(long, default_value_t = 1.0)]
    pub final_weight: f64,
    #[command(flatten)]
    pub weight_map: WeightMapArgs,
    #[arg(long, default_value_t = 0.3)]
    pub beta_sq: f64,
    #[arg(long, default_value_t = 2)]
    pub band_radius: usize,
    #[arg(long, default_value_t = 72)]
    pub base_size: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct WeightMapArgs {
    #[arg(long, default_value_t = 5.0)]
    pub k: f64,
    #[arg(long, default_value_t = 5)]
    pub se_size: usize,
    #[arg(long, default_value_t = 5)]
    pub gauss_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gauss_sigma: f64,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: contour_saliency::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Directory of saliency maps named like the dataset's ids.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.3)]
    pub beta_sq: f64,
    #[arg(long, default_value_t = 2)]
    pub band_radius: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Infer {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; every sample of `--split` is predicted.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub data: Option<PathBuf>,
    /// A single P6 image.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Weightmap {
    /// Binary P5 mask.
    #[arg(long)]
    pub mask: PathBuf,
    #[command(flatten)]
    pub weight_map: WeightMapArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Attn {
    /// Checkpoint trained with attention.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Samples to visualize from the split.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GradCheck {
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    /// Parameter entries probed in the end-to-end check.
    #[arg(long, default_value_t = 20)]
    pub probes: usize,
    /// Optional output directory for `gradcheck.csv`.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}
