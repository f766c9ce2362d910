use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

/// Elementwise nonlinearity. Pointwise maps keep every receptive field unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            Activation::Identity => v,
        }
    }

    /// Derivative at `v`; the leaky branch is used at exactly zero.
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if v > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn activation_forward(input: &Tensor, kind: Activation) -> Tensor {
    input.map(|v| kind.apply(v))
}

pub fn activation_backward(input: &Tensor, grad_out: &Tensor, kind: Activation) -> Result<Tensor> {
    input.zip_map(grad_out, |x, g| g * kind.derivative(x))
}
