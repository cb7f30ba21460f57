use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::laplace::{MixerConfig, MixerMode};
use crate::ssm::Ss2dConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    S,
    B,
    L,
    /// `S` depths with quartered widths at 32×32 input.
    Toy,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::S, Self::B, Self::L, Self::Toy];
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Self::S),
            "b" => Ok(Self::B),
            "l" => Ok(Self::L),
            "toy" => Ok(Self::Toy),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::S => "S",
            Self::B => "B",
            Self::L => "L",
            Self::Toy => "toy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub local_blocks: usize,
    pub tinyvim_blocks: usize,
    pub channels: usize,
    pub alpha: f64,
    pub pool_ratio: usize,
}

impl StageConfig {
    pub fn mixer(&self) -> Result<MixerConfig> {
        MixerConfig::new(self.alpha, self.pool_ratio, self.channels)
    }
}

/// Full architecture description; serializes to the JSON model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub in_channels: usize,
    /// Nominal square input side.
    pub input_size: usize,
    pub stages: Vec<StageConfig>,
    pub ffn_expansion: usize,
    pub num_classes: usize,
    pub mixer_mode: MixerMode,
    pub ss2d: Ss2dConfig,
}

pub const ALPHAS: [f64; 4] = [0.25, 0.5, 0.5, 0.75];
pub const POOL_RATIOS: [usize; 4] = [8, 4, 2, 1];

impl ModelConfig {
    pub fn variant(v: Variant, num_classes: usize) -> Self {
        let (depths, dims, input_size): ([(usize, usize); 4], [usize; 4], usize) = match v {
            Variant::S => ([(2, 1), (2, 1), (7, 2), (5, 1)], [48, 64, 168, 224], 224),
            Variant::B => ([(3, 1), (2, 1), (8, 2), (4, 1)], [48, 96, 192, 384], 224),
            Variant::L => ([(3, 1), (3, 1), (10, 2), (5, 1)], [64, 128, 384, 512], 224),
            Variant::Toy => ([(2, 1), (2, 1), (7, 2), (5, 1)], [12, 16, 42, 56], 32),
        };
        let stages = (0..4)
            .map(|s| StageConfig {
                local_blocks: depths[s].0,
                tinyvim_blocks: depths[s].1,
                channels: dims[s],
                alpha: ALPHAS[s],
                pool_ratio: POOL_RATIOS[s],
            })
            .collect();
        Self {
            name: v.to_string(),
            in_channels: 3,
            input_size,
            stages,
            ffn_expansion: 4,
            num_classes,
            mixer_mode: MixerMode::LowOnly,
            ss2d: Ss2dConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(!self.stages.is_empty(), "model needs at least one stage");
        ensure_arg!(
            self.in_channels >= 1 && self.num_classes >= 1,
            "channel and class counts must be positive"
        );
        ensure_arg!(self.ffn_expansion >= 1, "ffn expansion must be positive");
        ensure_arg!(
            self.stages[0].channels.is_multiple_of(2),
            "first stage width {} must be even for the stem",
            self.stages[0].channels
        );
        ensure_arg!(
            self.ss2d.expand >= 1 && self.ss2d.d_state >= 1,
            "scan block needs positive expansion and state size"
        );
        let mut prev_alpha = 0.0;
        for (i, s) in self.stages.iter().enumerate() {
            ensure_arg!(s.channels >= 1, "stage {i} has no channels");
            s.mixer()?;
            ensure_arg!(
                s.alpha >= prev_alpha,
                "alpha must not decrease across stages (stage {i})"
            );
            prev_alpha = s.alpha;
        }
        Ok(())
    }

    /// Downsampling factor from input to the last stage.
    pub fn total_stride(&self) -> usize {
        1 << (self.stages.len() + 1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
