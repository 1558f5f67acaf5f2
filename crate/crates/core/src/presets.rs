//! Named hyperparameter sets for the standard experiments.

use std::fmt;
use std::str::FromStr;

use crate::energy::ElasticaParams;
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::optimizer::LrSchedule;
use crate::solver::{DirectUpdate, Init, Mode, SolverConfig};

/// Learning-rate decay shared by all presets: halve every 20,000 iterations.
pub const DECAY_PERIOD: u64 = 20_000;
pub const DECAY_FACTOR: f64 = 0.5;

/// Finest-scale channels used when nothing smaller is requested.
pub const FULL_CHANNELS: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Random-mask inpainting of natural images with a plain U-net.
    PaperNatural,
    /// Shape completion with a gated U-net and a grey-initialised gap.
    PaperShape,
    /// Deep prior against plain gradient descent on the image.
    PaperAblation,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::PaperNatural, Preset::PaperShape, Preset::PaperAblation];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PaperNatural => "paper-natural",
            Preset::PaperShape => "paper-shape",
            Preset::PaperAblation => "paper-ablation",
        }
    }

    pub fn params(self) -> ElasticaParams {
        let (b, epsilon) = match self {
            Preset::PaperNatural => (0.175, 0.005),
            Preset::PaperShape | Preset::PaperAblation => (0.001, 0.0001),
        };
        ElasticaParams::new(b, epsilon).expect("preset parameters are valid")
    }

    pub fn learning_rate(self) -> f64 {
        match self {
            Preset::PaperNatural => 0.001,
            Preset::PaperShape => 0.00005,
            Preset::PaperAblation => 0.00004,
        }
    }

    pub fn default_iterations(self) -> u64 {
        match self {
            Preset::PaperNatural => 10_000,
            Preset::PaperShape => 50_000,
            Preset::PaperAblation => 20_000,
        }
    }

    pub fn init(self) -> Init {
        match self {
            Preset::PaperNatural => Init::UniformNoise,
            Preset::PaperShape => Init::Constant(0.5),
            Preset::PaperAblation => Init::MeanGrey,
        }
    }

    /// Network for an image of the given size with `channels` at the finest
    /// scale.
    pub fn network(self, height: usize, width: usize, channels: usize) -> NetworkSpec {
        let scales = NetworkSpec::default_scales(height, width);
        match self {
            Preset::PaperNatural => NetworkSpec::unet(scales, channels),
            Preset::PaperShape | Preset::PaperAblation => NetworkSpec::gated_unet(scales, channels),
        }
    }

    /// Fully resolved deep-prior configuration for `iterations` steps.
    pub fn config(self, height: usize, width: usize, channels: usize, iterations: u64) -> Result<SolverConfig> {
        let config = SolverConfig {
            mode: Mode::DeepPrior,
            params: self.params(),
            network: self.network(height, width, channels),
            schedule: LrSchedule::periodic(self.learning_rate(), DECAY_PERIOD, DECAY_FACTOR, iterations)?,
            max_iterations: iterations,
            init: self.init(),
            seed: 0,
            checkpoint_every: 1_000,
            log_every: 10,
            direct_update: match self {
                Preset::PaperAblation => DirectUpdate::GradientDescent,
                _ => DirectUpdate::Adam,
            },
            clip_norm: None,
        };
        config.validate()?;
        Ok(config)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown preset {s:?}; expected paper-natural, paper-shape or paper-ablation"
            ))
        })
    }
}
