//! Seeded corruption processes on images in `[0, 1]`.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), whose output stream is fixed
//! by its seed on every platform. Stage seeds for composite noise and per-file
//! seeds are derived from a master seed with [`derive_seed`]. Noise levels are
//! given on the 8-bit scale and divided by 255.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{N2kError, Result};
use crate::tensor::Tensor;

/// How salt-and-pepper density is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaltPepperMode {
    /// Corrupt with probability `d`, then a fair coin picks salt or pepper.
    #[default]
    Total,
    /// Salt with probability `d` and pepper with probability `d` (requires `d <= 0.5`).
    PerSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseKind {
    Awgn {
        sigma_g: f64,
    },
    Speckle {
        sigma_s: f64,
    },
    SaltPepper {
        density: f64,
        #[serde(default)]
        mode: SaltPepperMode,
    },
    Fusion {
        sigma_g: f64,
        sigma_s: f64,
        density: f64,
        #[serde(default)]
        mode: SaltPepperMode,
    },
}

/// A corruption process together with its seed.
///
/// Unknown keys are rejected by the flattened [`NoiseKind`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub seed: u64,
}

fn check_sigma(name: &str, sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(N2kError::config(format!(
            "{name} must be finite and >= 0, got {sigma}"
        )));
    }
    Ok(())
}

fn check_density(density: f64, mode: SaltPepperMode) -> Result<()> {
    let max = match mode {
        SaltPepperMode::Total => 1.0,
        SaltPepperMode::PerSide => 0.5,
    };
    if !(0.0..=max).contains(&density) {
        return Err(N2kError::config(format!(
            "salt-and-pepper density must lie in [0, {max}], got {density}"
        )));
    }
    Ok(())
}

impl NoiseKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseKind::Awgn { sigma_g } => check_sigma("sigma_g", sigma_g),
            NoiseKind::Speckle { sigma_s } => check_sigma("sigma_s", sigma_s),
            NoiseKind::SaltPepper { density, mode } => check_density(density, mode),
            NoiseKind::Fusion {
                sigma_g,
                sigma_s,
                density,
                mode,
            } => {
                check_sigma("sigma_g", sigma_g)?;
                check_sigma("sigma_s", sigma_s)?;
                check_density(density, mode)
            }
        }
    }
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        NoiseSpec { kind, seed }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.kind.validate()?;
        match self.kind {
            NoiseKind::Awgn { sigma_g } => apply_awgn(x, sigma_g, self.seed),
            NoiseKind::Speckle { sigma_s } => apply_speckle(x, sigma_s, self.seed),
            NoiseKind::SaltPepper { density, mode } => {
                apply_salt_pepper_mode(x, density, mode, self.seed)
            }
            NoiseKind::Fusion {
                sigma_g,
                sigma_s,
                density,
                mode,
            } => apply_fusion_mode(x, sigma_g, sigma_s, density, mode, self.seed),
        }
    }

    /// Same process with the seed replaced by `derive_seed(self.seed, index)`.
    pub fn for_index(&self, index: u64) -> NoiseSpec {
        NoiseSpec {
            kind: self.kind,
            seed: derive_seed(self.seed, index),
        }
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(master, index)`: `mix64(master ^ mix64(index + golden))`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ mix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

/// Stage indices used to split a fusion seed.
pub const STAGE_AWGN: u64 = 0;
pub const STAGE_SPECKLE: u64 = 1;
pub const STAGE_SALT_PEPPER: u64 = 2;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `y = x + n`, `n ~ N(0, (sigma_g / 255)^2)` i.i.d., no clamping.
pub fn apply_awgn(x: &Tensor, sigma_g: f64, seed: u64) -> Result<Tensor> {
    check_sigma("sigma_g", sigma_g)?;
    if sigma_g == 0.0 {
        return Ok(x.clone());
    }
    let std = sigma_g / 255.0;
    let mut rng = rng(seed);
    let mut y = x.clone();
    for v in y.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += std * n;
    }
    Ok(y)
}

/// `y = x + n * x`, `n` uniform on `[-a, a]` with `a = sqrt(3) * sigma_s / 255`
/// (zero mean, standard deviation `sigma_s / 255`).
pub fn apply_speckle(x: &Tensor, sigma_s: f64, seed: u64) -> Result<Tensor> {
    check_sigma("sigma_s", sigma_s)?;
    if sigma_s == 0.0 {
        return Ok(x.clone());
    }
    let half_width = 3f64.sqrt() * sigma_s / 255.0;
    let mut rng = rng(seed);
    let mut y = x.clone();
    for v in y.data_mut() {
        let n = rng.random_range(-half_width..=half_width);
        *v += n * *v;
    }
    Ok(y)
}

pub fn apply_salt_pepper(x: &Tensor, density: f64, seed: u64) -> Result<Tensor> {
    apply_salt_pepper_mode(x, density, SaltPepperMode::Total, seed)
}

/// Each pixel independently becomes exactly `0.0` or `1.0` according to `mode`.
pub fn apply_salt_pepper_mode(
    x: &Tensor,
    density: f64,
    mode: SaltPepperMode,
    seed: u64,
) -> Result<Tensor> {
    check_density(density, mode)?;
    let mut rng = rng(seed);
    let mut y = x.clone();
    for v in y.data_mut() {
        let u: f64 = rng.random();
        match mode {
            SaltPepperMode::Total => {
                if u < density {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
            SaltPepperMode::PerSide => {
                if u < density {
                    *v = 1.0;
                } else if u < 2.0 * density {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(y)
}

pub fn apply_fusion(
    x: &Tensor,
    sigma_g: f64,
    sigma_s: f64,
    density: f64,
    seed: u64,
) -> Result<Tensor> {
    apply_fusion_mode(x, sigma_g, sigma_s, density, SaltPepperMode::Total, seed)
}

/// AWGN, then speckle on the AWGN output, then salt-and-pepper projection.
/// Stage `k` uses `derive_seed(seed, k)`.
pub fn apply_fusion_mode(
    x: &Tensor,
    sigma_g: f64,
    sigma_s: f64,
    density: f64,
    mode: SaltPepperMode,
    seed: u64,
) -> Result<Tensor> {
    let g = apply_awgn(x, sigma_g, derive_seed(seed, STAGE_AWGN))?;
    let s = apply_speckle(&g, sigma_s, derive_seed(seed, STAGE_SPECKLE))?;
    apply_salt_pepper_mode(&s, density, mode, derive_seed(seed, STAGE_SALT_PEPPER))
}
