use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use elastica::image_io::{BitDepth, ShapeKind};
use elastica::network::Variant;
use elastica::presets::{Preset, DECAY_FACTOR, DECAY_PERIOD, FULL_CHANNELS};
use elastica::solver::{DirectUpdate, Init, Mode};

#[derive(Debug, Parser)]
#[command(
    name = "elastica",
    version,
    about = "Euler's elastica inpainting with a deep image prior"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inpaint one image.
    Inpaint(InpaintArgs),
    /// Run deep-prior and direct minimisation with the ablation preset and
    /// compare them.
    Ablate(AblateArgs),
    /// Run once per value of b and keep the run with the lowest MAE.
    SweepB(SweepArgs),
    /// Write a synthetic shape-completion instance.
    MakeInstance(InstanceArgs),
    /// Compare the energy gradient with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Greyscale PGM or PNG; only the pixels the mask marks as known are used.
    #[arg(long)]
    pub image: PathBuf,
    /// Mask image; grey values of at least 128 mark known pixels.
    #[arg(long, required_unless_present = "mask_density")]
    pub mask: Option<PathBuf>,
    /// Draw a random mask with this fraction of known pixels instead.
    #[arg(long, conflicts_with = "mask")]
    pub mask_density: Option<f64>,
    /// Seed of the random mask.
    #[arg(long, default_value_t = 0)]
    pub mask_seed: u64,
    /// Complete image used for error metrics.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Hyperparameter set; the flags below override single values.
    #[arg(long, default_value = "paper-natural")]
    pub preset: Preset,
    /// deep-prior or direct.
    #[arg(long, default_value = "deep-prior")]
    pub mode: Mode,
    /// unet or gated-unet [default: from the preset]
    #[arg(long)]
    pub arch: Option<Variant>,
    /// Weight of the total-variation part of the energy [default: from the preset]
    #[arg(long)]
    pub b: Option<f64>,
    /// Regularisation of the gradient magnitude [default: from the preset]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Initial learning rate [default: from the preset]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate decay period in iterations.
    #[arg(long, default_value_t = DECAY_PERIOD)]
    pub decay_every: u64,
    /// Factor applied at every decay step.
    #[arg(long, default_value_t = DECAY_FACTOR)]
    pub decay_factor: f64,
    /// Number of steps [default: from the preset]
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Network scales [default: 3 up to 128 pixels, else 4]
    #[arg(long)]
    pub scales: Option<usize>,
    /// Channels at the finest network scale.
    #[arg(long, default_value_t = FULL_CHANNELS)]
    pub channels: usize,
    /// noise, mean-grey or a grey value [default: from the preset]
    #[arg(long)]
    pub init: Option<Init>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics are recorded every this many iterations.
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    /// Direct-mode update, adam or gd [default: gd for paper-ablation, else adam]
    #[arg(long)]
    pub direct_update: Option<DirectUpdate>,
    /// Limit on the global gradient norm.
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Png,
    Pgm,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Png => "png",
            Format::Pgm => "pgm",
        }
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long, env = "ELASTICA_OUT_DIR", default_value = "elastica-out")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "png")]
    pub format: Format,
    /// Bits per sample of written images, 8 or 16.
    #[arg(long, default_value_t = 8, value_parser = parse_depth)]
    pub bit_depth: u8,
    /// No progress output.
    #[arg(long)]
    pub quiet: bool,
}

impl OutputArgs {
    pub fn depth(&self) -> BitDepth {
        if self.bit_depth == 16 {
            BitDepth::Sixteen
        } else {
            BitDepth::Eight
        }
    }
}

fn parse_depth(s: &str) -> Result<u8, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("bit depth must be 8 or 16, got {s}")),
    }
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Continue from a checkpoint written by an earlier run with the same
    /// settings; --iterations is the new total.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 20_000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Comma-separated values of b.
    #[arg(long, value_delimiter = ',', required = true)]
    pub b_values: Vec<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct InstanceArgs {
    /// bar-gap, circle-arc or double-bar.
    #[arg(long, default_value = "double-bar")]
    pub kind: ShapeKind,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Width of the hidden central band.
    #[arg(long, default_value_t = 48)]
    pub gap: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Side length of the random test image, at most 32.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub b: f64,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Fraction of known pixels in the random mask.
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}
