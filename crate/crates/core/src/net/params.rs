use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{NetworkSpec, Plan};
use crate::conv::ConvKernel;
use crate::error::{N2kError, Result};
use crate::tensor::{Shape, Tensor};

/// Version tag written into checkpoints.
pub const PARAMS_VERSION: u32 = 1;

/// Trainable weights of a [`NetworkSpec`], one kernel per convolution node in
/// declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: NetworkSpec,
    pub kernels: Vec<ConvKernel>,
    pub version: u32,
    pub seed: u64,
}

/// Per-kernel gradient with the same layout as [`ConvKernel`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub kernels: Vec<KernelGrad>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ParamGrads {
            kernels: params
                .kernels
                .iter()
                .map(|k| KernelGrad {
                    weights: Tensor::zeros(k.weights().shape()),
                    bias: vec![0.0; k.out_channels()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            a.weights.add_assign(&b.weights)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for k in &mut self.kernels {
            k.weights.scale(factor);
            k.bias.iter_mut().for_each(|b| *b *= factor);
        }
    }

    /// All gradient entries in parameter order (weights then bias per kernel).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in &self.kernels {
            out.extend_from_slice(k.weights.data());
            out.extend_from_slice(&k.bias);
        }
        out
    }
}

impl ModelParams {
    pub fn plan(&self) -> Result<Plan> {
        self.spec.plan()
    }

    pub fn num_parameters(&self) -> usize {
        self.kernels
            .iter()
            .map(|k| k.weights().len() + k.bias().len())
            .sum()
    }

    /// Kernels with a non-zero center tap in a donut layer, by index.
    pub fn donut_violations(&self) -> Vec<usize> {
        self.kernels
            .iter()
            .enumerate()
            .filter(|(_, k)| k.is_donut() && !k.has_zero_center())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn enforce_donut(&mut self) {
        self.kernels.iter_mut().for_each(ConvKernel::enforce_donut);
    }

    /// Every weight and bias, in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for k in &self.kernels {
            out.extend_from_slice(k.weights().data());
            out.extend_from_slice(k.bias());
        }
        out
    }

    /// Overwrites every weight and bias from a flat buffer in checkpoint order.
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(N2kError::config(format!(
                "expected {} parameter values, got {}",
                self.num_parameters(),
                values.len()
            )));
        }
        let mut at = 0;
        for k in &mut self.kernels {
            let n = k.weights().len();
            k.weights_mut()
                .data_mut()
                .copy_from_slice(&values[at..at + n]);
            at += n;
            let m = k.bias().len();
            k.bias_mut().copy_from_slice(&values[at..at + m]);
            at += m;
        }
        Ok(())
    }

    /// Same layout, every parameter zero.
    pub fn zeroed(&self) -> ModelParams {
        let mut p = self.clone();
        for k in &mut p.kernels {
            k.weights_mut().data_mut().fill(0.0);
            k.bias_mut().fill(0.0);
        }
        p
    }
}

/// Fan-in scaled uniform initialization: weights and biases drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, where `fan_in` counts live taps (the
/// donut center is excluded). This is the usual deep-learning framework default
/// and keeps the untrained output small, which the large default learning rate
/// needs.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ModelParams> {
    let plan = spec.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernels = Vec::with_capacity(plan.conv_count());
    for node in &spec.nodes {
        let (Some((size, dilation, donut)), Some((cin, cout))) =
            (node.layer.conv_geometry(), node.layer.conv_channels())
        else {
            continue;
        };
        let taps = if donut { size * size - 1 } else { size * size };
        let fan_in = (cin * taps) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let shape = Shape::new(cout, cin, size, size);
        let weights: Vec<f64> = (0..shape.numel())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..cout).map(|_| rng.random_range(-bound..bound)).collect();
        kernels.push(ConvKernel::new(
            Tensor::from_vec(shape, weights)?,
            bias,
            dilation,
            donut,
        )?);
    }
    Ok(ModelParams {
        spec: spec.clone(),
        kernels,
        version: PARAMS_VERSION,
        seed,
    })
}
