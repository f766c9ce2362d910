//! Rectified adaptive-moment optimizer (RAdam) with a staircase exponential
//! learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{N2kError, Result};
use crate::net::{ModelParams, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate is multiplied by `decay_factor` every `decay_interval` steps.
    pub decay_factor: f64,
    pub decay_interval: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.95,
            decay_interval: 1000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(N2kError::config(format!(
                    "{name} must lie in [0, 1), got {v}"
                )))
            }
        };
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.lr > 0.0 && self.eps > 0.0 && self.decay_factor > 0.0 && self.decay_interval > 0)
        {
            return Err(N2kError::config(
                "lr, eps, decay_factor and decay_interval must be positive",
            ));
        }
        Ok(())
    }

    /// Learning rate used by step `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        let stage = t.saturating_sub(1) / self.decay_interval;
        self.lr * self.decay_factor.powf(stage as f64)
    }
}

/// Moment accumulators and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimState {
    pub fn new(config: OptimConfig, num_params: usize) -> Self {
        OptimState {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    /// Learning rate that the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.t + 1)
    }

    /// One update of `theta` in place.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != theta.len() {
            return Err(N2kError::config(format!(
                "optimizer holds {} moments but got {} parameters and {} gradients",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        let c = self.config;
        self.t += 1;
        let t = self.t as i32;
        let lr = c.lr_at(self.t);
        let b1t = c.beta1.powi(t);
        let b2t = c.beta2.powi(t);
        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * self.t as f64 * b2t / (1.0 - b2t);
        let rect = (rho_t > 4.0).then(|| {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt()
        });
        for ((p, &g), (m, v)) in theta
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / (1.0 - b1t);
            match rect {
                Some(r) => {
                    let v_hat = (*v / (1.0 - b2t)).sqrt();
                    *p -= lr * r * m_hat / (v_hat + c.eps);
                }
                None => *p -= lr * m_hat,
            }
        }
        Ok(())
    }
}

/// Applies one optimizer step to every kernel and re-zeroes donut centers.
pub fn radam_step(
    state: &mut OptimState,
    params: &mut ModelParams,
    grads: &ParamGrads,
) -> Result<()> {
    let names: Vec<&str> = params
        .spec
        .nodes
        .iter()
        .filter(|n| n.layer.conv_geometry().is_some())
        .map(|n| n.name.as_str())
        .collect();
    for (i, k) in grads.kernels.iter().enumerate() {
        if !k.weights.is_finite() || !k.bias.iter().all(|b| b.is_finite()) {
            let name = names.get(i).copied().unwrap_or("?");
            return Err(N2kError::Training(format!(
                "non-finite gradient in parameter block {i} (`{name}`)"
            )));
        }
    }
    let mut theta = params.flatten();
    state.update(&mut theta, &grads.flatten())?;
    params.assign_flat(&theta)?;
    params.enforce_donut();
    Ok(())
}
