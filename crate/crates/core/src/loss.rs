//! Self-supervised objectives on a prediction `f(x)` and the noisy target `x`.

use serde::{Deserialize, Serialize};

use crate::error::{N2kError, Result};
use crate::net::{backward, forward_trace, ModelParams, ParamGrads};
use crate::tensor::{Shape, Tensor};

/// Loss value and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Tensor,
}

/// Whether the adaptive weight participates in differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightGrad {
    /// The weight is a per-step constant.
    #[default]
    Detached,
    /// Differentiate through `w(r)` as well.
    Attached,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossSpec {
    L2Self,
    MaskedL2 {
        mask_rate: f64,
    },
    Adss {
        lambda: f64,
        #[serde(default)]
        weight_grad: WeightGrad,
    },
    AdssTv {
        lambda: f64,
        alpha: f64,
        #[serde(default)]
        weight_grad: WeightGrad,
    },
}

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_TV_ALPHA: f64 = 1e-4;

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::Adss {
            lambda: DEFAULT_LAMBDA,
            weight_grad: WeightGrad::Detached,
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(N2kError::config(format!(
            "{name} must be finite and >= 0, got {v}"
        )));
    }
    Ok(())
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::L2Self => Ok(()),
            LossSpec::MaskedL2 { mask_rate } => {
                if mask_rate > 0.0 && mask_rate < 1.0 {
                    Ok(())
                } else {
                    Err(N2kError::config(format!(
                        "mask_rate must lie in (0, 1), got {mask_rate}"
                    )))
                }
            }
            LossSpec::Adss { lambda, .. } => non_negative("lambda", lambda),
            LossSpec::AdssTv { lambda, alpha, .. } => {
                non_negative("lambda", lambda)?;
                non_negative("alpha", alpha)
            }
        }
    }

    pub fn is_masked(&self) -> bool {
        matches!(self, LossSpec::MaskedL2 { .. })
    }

    /// Loss of an unmasked prediction. Masked losses need the network and go
    /// through [`masked_l2_loss`] instead.
    pub fn evaluate(&self, pred: &Tensor, x: &Tensor) -> Result<LossValue> {
        match *self {
            LossSpec::L2Self => l2_self_loss(pred, x),
            LossSpec::Adss {
                lambda,
                weight_grad,
            } => adss_loss_with(pred, x, lambda, weight_grad),
            LossSpec::AdssTv {
                lambda,
                alpha,
                weight_grad,
            } => {
                let mut data = adss_loss_with(pred, x, lambda, weight_grad)?;
                let tv = tv_term(pred, alpha)?;
                data.loss += tv.loss;
                data.grad.add_assign(&tv.grad)?;
                Ok(data)
            }
            LossSpec::MaskedL2 { .. } => Err(N2kError::config(
                "masked loss must be evaluated with masked_l2_loss",
            )),
        }
    }
}

/// Mean squared residual `mean((pred - x)^2)`.
pub fn l2_self_loss(pred: &Tensor, x: &Tensor) -> Result<LossValue> {
    pred.expect_same_shape(x, "l2_self_loss")?;
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(x.data()) {
        let r = p - t;
        sum += r * r;
        *g = 2.0 * r / n;
    }
    Ok(LossValue {
        loss: sum / n,
        grad,
    })
}

/// `1 / (1 + lambda * |r|)`.
#[inline]
pub fn adss_weight(residual: f64, lambda: f64) -> f64 {
    1.0 / (1.0 + lambda * residual.abs())
}

/// Adaptive self-supervision loss `mean(w * (pred - x)^2)` with the weight detached.
pub fn adss_loss(pred: &Tensor, x: &Tensor, lambda: f64) -> Result<LossValue> {
    adss_loss_with(pred, x, lambda, WeightGrad::Detached)
}

pub fn adss_loss_with(
    pred: &Tensor,
    x: &Tensor,
    lambda: f64,
    mode: WeightGrad,
) -> Result<LossValue> {
    pred.expect_same_shape(x, "adss_loss")?;
    non_negative("lambda", lambda)?;
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(x.data()) {
        let r = p - t;
        let w = adss_weight(r, lambda);
        sum += w * (r * r);
        *g = match mode {
            WeightGrad::Detached => 2.0 * w * r / n,
            // d/dr [r^2 / (1 + lambda |r|)] = 2 w r - lambda |r| r w^2
            WeightGrad::Attached => (2.0 * w * r - lambda * r.abs() * r * w * w) / n,
        };
    }
    Ok(LossValue {
        loss: sum / n,
        grad,
    })
}

/// Anisotropic total variation `alpha * mean(|forward differences|)`, the
/// mean taken over all horizontal and vertical difference terms.
pub fn tv_term(pred: &Tensor, alpha: f64) -> Result<LossValue> {
    non_negative("alpha", alpha)?;
    let s = pred.shape();
    let (h, w) = (s.height, s.width);
    let terms = s.batch * s.channels * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
    let mut grad = Tensor::zeros(s);
    if terms == 0 {
        return Ok(LossValue { loss: 0.0, grad });
    }
    let scale = alpha / terms as f64;
    let mut sum = 0.0;
    for b in 0..s.batch {
        for c in 0..s.channels {
            let p = pred.plane(b, c);
            let g = grad.plane_mut(b, c);
            for i in 0..h {
                for j in 0..w {
                    let k = i * w + j;
                    if j + 1 < w {
                        let d = p[k + 1] - p[k];
                        sum += d.abs();
                        let sg = sign(d) * scale;
                        g[k + 1] += sg;
                        g[k] -= sg;
                    }
                    if i + 1 < h {
                        let d = p[k + w] - p[k];
                        sum += d.abs();
                        let sg = sign(d) * scale;
                        g[k + w] += sg;
                        g[k] -= sg;
                    }
                }
            }
        }
    }
    Ok(LossValue {
        loss: sum * scale,
        grad,
    })
}

/// Mean absolute forward difference (TV with `alpha = 1`).
pub fn total_variation(t: &Tensor) -> f64 {
    tv_term(t, 1.0).map(|v| v.loss).unwrap_or(0.0)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Set of masked pixel positions for the masking baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    shape: Shape,
    flags: Vec<bool>,
}

impl PixelMask {
    pub fn new(shape: Shape, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != shape.numel() {
            return Err(N2kError::config("mask size does not match image"));
        }
        Ok(PixelMask { shape, flags })
    }

    pub fn all(shape: Shape) -> Self {
        PixelMask {
            shape,
            flags: vec![true; shape.numel()],
        }
    }

    pub fn from_pixels(shape: Shape, pixels: &[(usize, usize)]) -> Result<Self> {
        let mut flags = vec![false; shape.numel()];
        for &(i, j) in pixels {
            if i >= shape.height || j >= shape.width {
                return Err(N2kError::config(format!(
                    "mask pixel ({i}, {j}) out of bounds"
                )));
            }
            for b in 0..shape.batch {
                for c in 0..shape.channels {
                    flags[((b * shape.channels + c) * shape.height + i) * shape.width + j] = true;
                }
            }
        }
        Ok(PixelMask { shape, flags })
    }

    /// Each pixel masked independently with probability `rate`.
    pub fn random(shape: Shape, rate: f64, rng: &mut impl rand::Rng) -> Self {
        PixelMask {
            shape,
            flags: (0..shape.numel())
                .map(|_| rng.random::<f64>() < rate)
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Input with masked pixels replaced by zero.
    pub fn blank(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.shape {
            return Err(N2kError::Shape {
                op: "mask",
                left: x.shape().to_string(),
                right: self.shape.to_string(),
            });
        }
        let mut out = x.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&self.flags) {
            if m {
                *v = 0.0;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct MaskedLoss {
    pub loss: f64,
    /// Gradient with respect to the prediction on the masked input.
    pub grad_pred: Tensor,
    pub grads: ParamGrads,
}

/// Masking baseline: evaluate the network on the blanked input and average the
/// squared residual over masked pixels only.
pub fn masked_l2_loss(params: &ModelParams, x: &Tensor, mask: &PixelMask) -> Result<MaskedLoss> {
    let count = mask.count();
    if count == 0 {
        return Err(N2kError::config("mask selects no pixels"));
    }
    let blanked = mask.blank(x)?;
    let trace = forward_trace(params, &blanked)?;
    let pred = trace.output();
    let n = count as f64;
    let mut grad_pred = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for (((g, &p), &t), &m) in grad_pred
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(x.data())
        .zip(mask.flags())
    {
        if m {
            let r = p - t;
            sum += r * r;
            *g = 2.0 * r / n;
        }
    }
    let grads = backward(params, &trace, &grad_pred)?;
    Ok(MaskedLoss {
        loss: sum / n,
        grad_pred,
        grads,
    })
}
