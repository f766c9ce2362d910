//! Training configuration, read from and echoed as TOML.
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! train_dir = "images/train"      # optional when images are passed in code
//! validation_dir = "images/val"   # optional clean held-out images
//! patch_size = 64
//! stride = 64                     # defaults to patch_size
//! augment = true                  # random dihedral transform per patch and epoch
//! precorrupted = false            # true: training images are already noisy
//!
//! [train]
//! epochs = 30
//! batch_size = 64
//!
//! [optim]
//! lr = 0.03
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! decay_factor = 0.95
//! decay_interval = 1000
//!
//! [loss]
//! kind = "adss"        # l2-self | masked-l2 | adss | adss-tv
//! lambda = 10.0
//!
//! [noise]              # required unless data.precorrupted
//! kind = "salt-pepper"
//! density = 0.3
//!
//! [network]
//! donut_kernel = 3
//! path_dilations = [2, 3]
//! path_depth = 4
//! channel_width = 32
//! invariant_by_construction = true
//! ```
//!
//! Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{N2kError, Result};
use crate::loss::LossSpec;
use crate::net::ArchConfig;
use crate::noise::NoiseKind;
use crate::optim::OptimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_dir: Option<PathBuf>,
    pub patch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    pub augment: bool,
    pub precorrupted: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            validation_dir: None,
            patch_size: 64,
            stride: None,
            augment: true,
            precorrupted: false,
        }
    }
}

impl DataConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 30,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub train: ScheduleConfig,
    pub optim: OptimConfig,
    pub loss: LossSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseKind>,
    pub network: ArchConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| N2kError::config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| N2kError::io(path, e))?;
        TrainConfig::from_toml(&text).map_err(|e| match e {
            N2kError::Config(m) => N2kError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copy with every optional value that has a default filled in, for echoing
    /// into run directories.
    pub fn resolved(&self) -> TrainConfig {
        let mut out = self.clone();
        out.data.stride = Some(self.data.stride());
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| N2kError::config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return Err(N2kError::config(format!("seed must be <= {}", i64::MAX)));
        }
        if self.data.patch_size == 0 || self.data.stride() == 0 {
            return Err(N2kError::config(
                "data.patch_size and data.stride must be positive",
            ));
        }
        if self.train.batch_size == 0 {
            return Err(N2kError::config("train.batch_size must be positive"));
        }
        match (&self.noise, self.data.precorrupted) {
            (Some(_), true) => {
                return Err(N2kError::config(
                    "[noise] conflicts with data.precorrupted = true",
                ))
            }
            (None, false) => {
                return Err(N2kError::config(
                    "set a [noise] section or data.precorrupted = true",
                ))
            }
            (Some(kind), false) => kind.validate()?,
            (None, true) => {}
        }
        self.optim.validate()?;
        self.loss.validate()?;
        let net = &self.network;
        if net.channel_width == 0 || net.path_depth == 0 || net.path_dilations.is_empty() {
            return Err(N2kError::config(
                "network needs a positive width, depth and at least one path",
            ));
        }
        Ok(())
    }
}
