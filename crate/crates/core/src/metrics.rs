//! PSNR, SSIM, brightness shift and dihedral test-time averaging.

use std::fmt;

use serde::Serialize;

use crate::dihedral::{augment_dihedral, invert_dihedral, GROUP_ORDER};
use crate::error::{N2kError, Result};
use crate::net::{forward, ModelParams};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(pred: &Tensor, reference: &Tensor) -> Result<f64> {
    pred.expect_same_shape(reference, "mse")?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; `f64::INFINITY` when the images are identical.
pub fn psnr(pred: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    let e = mse(pred, reference)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round())
}

/// PSNR after rounding both images to 8-bit levels, peak 255.
pub fn psnr_quantized(pred: &Tensor, reference: &Tensor) -> Result<f64> {
    psnr(&quantize(pred), &quantize(reference), 255.0)
}

/// `mean(pred) - mean(reference)`.
pub fn brightness_shift(pred: &Tensor, reference: &Tensor) -> Result<f64> {
    pred.expect_same_shape(reference, "brightness_shift")?;
    Ok(pred.mean() - reference.mean())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|k| (-((k as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[i * w + j + k])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(i + k) * ow + j])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5),
/// constants `K1 = 0.01`, `K2 = 0.03`, dynamic range 1. Multi-plane inputs
/// average the per-plane means.
pub fn ssim(pred: &Tensor, reference: &Tensor) -> Result<f64> {
    pred.expect_same_shape(reference, "ssim")?;
    let s = pred.shape();
    if s.height < SSIM_WINDOW || s.width < SSIM_WINDOW {
        return Err(N2kError::config(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            s.height, s.width
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (h, w) = (s.height, s.width);
    let mut total = 0.0;
    let mut planes = 0;
    for b in 0..s.batch {
        for c in 0..s.channels {
            let x = pred.plane(b, c);
            let y = reference.plane(b, c);
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
            let mx = filter_valid(x, h, w, &taps);
            let my = filter_valid(y, h, w, &taps);
            let sxx = filter_valid(&xx, h, w, &taps);
            let syy = filter_valid(&yy, h, w, &taps);
            let sxy = filter_valid(&xy, h, w, &taps);
            let map_sum: f64 = (0..mx.len())
                .map(|k| {
                    let (ux, uy) = (mx[k], my[k]);
                    let vx = sxx[k] - ux * ux;
                    let vy = syy[k] - uy * uy;
                    let cov = sxy[k] - ux * uy;
                    ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                        / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
                })
                .sum();
            total += map_sum / mx.len() as f64;
            planes += 1;
        }
    }
    Ok(total / planes as f64)
}

/// Quality of a prediction against a clean reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    /// dB; infinite for a perfect match.
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub mean_shift: f64,
}

fn serialize_db<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

impl EvalReport {
    pub fn compute(pred: &Tensor, reference: &Tensor, quantized: bool) -> Result<Self> {
        Ok(EvalReport {
            psnr: if quantized {
                psnr_quantized(pred, reference)?
            } else {
                psnr(pred, reference, 1.0)?
            },
            ssim: ssim(pred, reference)?,
            mean_shift: brightness_shift(pred, reference)?,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.psnr.is_finite() {
            writeln!(f, "psnr: {:.4} dB", self.psnr)?;
        } else {
            writeln!(f, "psnr: inf")?;
        }
        write!(
            f,
            "ssim: {:.6}\nmean_shift: {:+.6}",
            self.ssim, self.mean_shift
        )
    }
}

/// Averages `denoise` over the eight dihedral transforms of `x`, each output
/// mapped back by the inverse transform. The sum is a fixed pairwise tree.
pub fn tta_apply(x: &Tensor, denoise: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let mut outs = Vec::with_capacity(GROUP_ORDER);
    for k in 0..GROUP_ORDER {
        let y = denoise(&augment_dihedral(x, k)?)?;
        outs.push(invert_dihedral(&y, k)?);
    }
    while outs.len() > 1 {
        outs = outs
            .chunks(2)
            .map(|pair| {
                let mut a = pair[0].clone();
                a.add_assign(&pair[1]).map(|_| a)
            })
            .collect::<Result<Vec<_>>>()?;
    }
    let mut avg = outs.pop().expect("eight branches");
    avg.scale(1.0 / GROUP_ORDER as f64);
    Ok(avg)
}

/// Network prediction averaged over the dihedral group.
pub fn tta_denoise(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    tta_apply(x, |t| forward(params, t))
}
