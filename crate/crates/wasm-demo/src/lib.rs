//! Browser bindings for the demo page in `www/`.
//!
//! Images cross the boundary as row-major 8-bit grayscale buffers.

use wasm_bindgen::prelude::*;

use n2k_core::analyzer::{check_invariance_static, receptive_fields};
use n2k_core::loss::LossSpec;
use n2k_core::metrics::psnr;
use n2k_core::net::{
    backward, forward, forward_trace, init_params, ArchConfig, ModelParams, NetworkSpec,
};
use n2k_core::noise::{NoiseKind, NoiseSpec, SaltPepperMode};
use n2k_core::optim::{radam_step, OptimConfig, OptimState};
use n2k_core::synth::synthetic_image;
use n2k_core::Tensor;

fn js_err(e: n2k_core::N2kError) -> JsError {
    JsError::new(&e.to_string())
}

fn to_u8(t: &Tensor) -> Vec<u8> {
    t.data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn from_u8(pixels: &[u8], size: usize) -> Result<Tensor, JsError> {
    Tensor::image(
        size,
        size,
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .map_err(js_err)
}

fn noise_kind(kind: &str, sigma_g: f64, sigma_s: f64, density: f64) -> Result<NoiseKind, JsError> {
    let mode = SaltPepperMode::Total;
    let kind = match kind {
        "awgn" => NoiseKind::Awgn { sigma_g },
        "speckle" => NoiseKind::Speckle { sigma_s },
        "salt-pepper" => NoiseKind::SaltPepper { density, mode },
        "fusion" => NoiseKind::Fusion {
            sigma_g,
            sigma_s,
            density,
            mode,
        },
        other => return Err(JsError::new(&format!("unknown noise kind {other:?}"))),
    };
    kind.validate().map_err(js_err)?;
    Ok(kind)
}

/// A procedural `size x size` test image.
#[wasm_bindgen]
pub fn synthetic(size: usize, seed: u64) -> Vec<u8> {
    to_u8(&synthetic_image(size, size, seed))
}

/// Corrupts a square image. Sigmas are on the 0..255 scale.
#[wasm_bindgen]
pub fn corrupt(
    pixels: &[u8],
    size: usize,
    kind: &str,
    sigma_g: f64,
    sigma_s: f64,
    density: f64,
    seed: u64,
) -> Result<Vec<u8>, JsError> {
    let spec = NoiseSpec::new(noise_kind(kind, sigma_g, sigma_s, density)?, seed);
    Ok(to_u8(&spec.apply(&from_u8(pixels, size)?).map_err(js_err)?))
}

/// Receptive field of a single-path network: donut kernel `kernel`, then
/// `depth` dilated `3 x 3` layers of dilation `dilation`.
#[wasm_bindgen]
pub struct FieldMap {
    radius: usize,
    cells: Vec<u8>,
    invariant: bool,
    report: String,
}

#[wasm_bindgen]
impl FieldMap {
    #[wasm_bindgen(constructor)]
    pub fn new(kernel: usize, dilation: usize, depth: usize) -> Result<FieldMap, JsError> {
        let spec = NetworkSpec::two_path(&ArchConfig {
            donut_kernel: kernel,
            path_dilations: vec![dilation],
            path_depth: depth,
            channel_width: 1,
            invariant_by_construction: false,
        })
        .map_err(js_err)?;
        let fields = receptive_fields(&spec).map_err(js_err)?;
        let out = spec
            .nodes
            .iter()
            .position(|n| n.name == spec.output)
            .ok_or_else(|| JsError::new("spec has no output node"))?;
        let field = &fields[out];
        let radius = field.radius() as usize;
        let side = 2 * radius + 1;
        let mut cells = vec![0; side * side];
        for &(i, j) in field.iter() {
            cells[(i + radius as i64) as usize * side + (j + radius as i64) as usize] = 1;
        }
        let report = check_invariance_static(&spec).map_err(js_err)?;
        Ok(FieldMap {
            radius,
            cells,
            invariant: report.invariant,
            report: report.to_string(),
        })
    }

    /// Half-width of the map; it is `2 * radius + 1` cells wide.
    pub fn radius(&self) -> usize {
        self.radius
    }

    /// 1 where the output depends on the input at that offset, row-major.
    pub fn cells(&self) -> Vec<u8> {
        self.cells.clone()
    }

    pub fn invariant(&self) -> bool {
        self.invariant
    }

    pub fn report(&self) -> String {
        self.report.clone()
    }
}

/// Self-supervised training of a small network on one noisy image.
#[wasm_bindgen]
pub struct Trainer {
    size: usize,
    params: ModelParams,
    state: OptimState,
    loss: LossSpec,
    clean: Tensor,
    noisy: Tensor,
    last_loss: f64,
}

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(
        clean: &[u8],
        noisy: &[u8],
        size: usize,
        lambda: f64,
        seed: u64,
    ) -> Result<Trainer, JsError> {
        let spec = NetworkSpec::two_path(&ArchConfig {
            channel_width: 8,
            path_depth: 2,
            ..ArchConfig::default()
        })
        .map_err(js_err)?;
        let params = init_params(&spec, seed).map_err(js_err)?;
        let loss = LossSpec::Adss {
            lambda,
            weight_grad: Default::default(),
        };
        loss.validate().map_err(js_err)?;
        let optim = OptimConfig {
            lr: 1e-2,
            ..OptimConfig::default()
        };
        Ok(Trainer {
            size,
            state: OptimState::new(optim, params.num_parameters()),
            params,
            loss,
            clean: from_u8(clean, size)?,
            noisy: from_u8(noisy, size)?,
            last_loss: f64::NAN,
        })
    }

    /// Runs `steps` optimizer steps against the noisy image; returns the last loss.
    pub fn step(&mut self, steps: usize) -> Result<f64, JsError> {
        for _ in 0..steps {
            let trace = forward_trace(&self.params, &self.noisy).map_err(js_err)?;
            let value = self
                .loss
                .evaluate(trace.output(), &self.noisy)
                .map_err(js_err)?;
            let grads = backward(&self.params, &trace, &value.grad).map_err(js_err)?;
            radam_step(&mut self.state, &mut self.params, &grads).map_err(js_err)?;
            self.last_loss = value.loss;
        }
        Ok(self.last_loss)
    }

    pub fn steps_done(&self) -> u64 {
        self.state.t
    }

    pub fn prediction(&self) -> Result<Vec<u8>, JsError> {
        Ok(to_u8(&forward(&self.params, &self.noisy).map_err(js_err)?))
    }

    pub fn psnr_noisy(&self) -> Result<f64, JsError> {
        psnr(&self.noisy, &self.clean, 1.0).map_err(js_err)
    }

    pub fn psnr_prediction(&self) -> Result<f64, JsError> {
        let pred = forward(&self.params, &self.noisy).map_err(js_err)?;
        psnr(&pred, &self.clean, 1.0).map_err(js_err)
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_map_marks_blind_spot() {
        let good = FieldMap::new(3, 2, 2).unwrap();
        let side = 2 * good.radius() + 1;
        assert!(good.invariant());
        assert_eq!(good.cells()[good.radius() * side + good.radius()], 0);
        let bad = FieldMap::new(3, 1, 2).unwrap();
        assert!(!bad.invariant());
        assert!(bad.report().contains("witness:"));
    }

    #[test]
    fn trainer_reduces_loss() {
        let clean = synthetic(24, 1);
        let noisy = corrupt(&clean, 24, "salt-pepper", 0.0, 0.0, 0.2, 3).unwrap();
        let mut t = Trainer::new(&clean, &noisy, 24, 10.0, 0).unwrap();
        let first = t.step(1).unwrap();
        let later = t.step(30).unwrap();
        assert!(later < first, "{first} -> {later}");
        assert_eq!(t.prediction().unwrap().len(), 24 * 24);
    }
}
