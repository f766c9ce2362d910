//! Self-supervised training loop.
//!
//! Every random choice comes from a ChaCha8 stream keyed by the master seed
//! and a fixed stream id, so a run is reproduced exactly by its config.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dihedral::{augment_dihedral, GROUP_ORDER};
use crate::error::{N2kError, Result};
use crate::loss::{masked_l2_loss, LossSpec, PixelMask};
use crate::metrics::EvalReport;
use crate::net::{
    backward, forward, forward_trace, init_params, ModelParams, NetworkSpec, ParamGrads,
};
use crate::noise::{derive_seed, rng, NoiseSpec};
use crate::optim::{radam_step, OptimState};
use crate::patches::extract_patches;
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_PATCHES: u64 = 2;
const STREAM_EPOCH: u64 = 3;
const STREAM_VALIDATION_NOISE: u64 = 4;

/// Seed of stream `stream`, item `index`, under `master`.
pub fn stream_seed(master: u64, stream: u64, index: u64) -> u64 {
    derive_seed(derive_seed(master, stream), index)
}

/// Noise process for the training images; image `i` uses `for_index(i)`.
pub fn noise_spec(config: &TrainConfig) -> Option<NoiseSpec> {
    config
        .noise
        .map(|kind| NoiseSpec::new(kind, derive_seed(config.seed, STREAM_NOISE)))
}

pub fn initial_params(config: &TrainConfig) -> Result<ModelParams> {
    let spec = NetworkSpec::two_path(&config.network)?;
    init_params(&spec, derive_seed(config.seed, STREAM_INIT))
}

#[derive(Debug, Clone)]
pub struct ValidationPair {
    pub noisy: Tensor,
    pub clean: Tensor,
}

/// Training patches: each image is corrupted once (unless the data is already
/// noisy) with its own seed, then cut into patches.
pub fn training_patches(images: &[Tensor], config: &TrainConfig) -> Result<Vec<Tensor>> {
    let noise = noise_spec(config);
    let per_image: Vec<Vec<Tensor>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let noisy = match &noise {
                Some(spec) => spec.for_index(i as u64).apply(img)?,
                None => img.clone(),
            };
            extract_patches(
                &noisy,
                config.data.patch_size,
                config.data.stride(),
                stream_seed(config.seed, STREAM_PATCHES, i as u64),
            )
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Held-out clean images paired with a corruption drawn from its own stream.
pub fn validation_pairs(clean: &[Tensor], config: &TrainConfig) -> Result<Vec<ValidationPair>> {
    let Some(kind) = config.noise else {
        return Ok(Vec::new());
    };
    let spec = NoiseSpec::new(kind, derive_seed(config.seed, STREAM_VALIDATION_NOISE));
    clean
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(ValidationPair {
                noisy: spec.for_index(i as u64).apply(c)?,
                clean: c.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_shift: Option<f64>,
}

/// Loss and parameter gradients for one sample.
fn sample_grads(
    params: &ModelParams,
    x: &Tensor,
    loss: &LossSpec,
    seed: u64,
) -> Result<(f64, ParamGrads)> {
    if let LossSpec::MaskedL2 { mask_rate } = *loss {
        let mut mask = PixelMask::random(x.shape(), mask_rate, &mut rng(seed));
        if mask.count() == 0 {
            let mut flags = vec![false; x.len()];
            flags[rng(seed).random_range(0..x.len())] = true;
            mask = PixelMask::new(x.shape(), flags)?;
        }
        let out = masked_l2_loss(params, x, &mask)?;
        return Ok((out.loss, out.grads));
    }
    let trace = forward_trace(params, x)?;
    let value = loss.evaluate(trace.output(), x)?;
    let grads = backward(params, &trace, &value.grad)?;
    Ok((value.loss, grads))
}

/// Mean PSNR, SSIM and brightness shift of single-pass predictions.
pub fn validate(params: &ModelParams, pairs: &[ValidationPair]) -> Result<Option<EvalReport>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let reports: Vec<EvalReport> = pairs
        .iter()
        .map(|p| EvalReport::compute(&forward(params, &p.noisy)?, &p.clean, false))
        .collect::<Result<_>>()?;
    let n = reports.len() as f64;
    Ok(Some(EvalReport {
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_shift: reports.iter().map(|r| r.mean_shift).sum::<f64>() / n,
    }))
}

/// Runs `config.train.epochs` epochs of minibatch RAdam over `patches`.
///
/// Each epoch shuffles the patches and, when augmentation is on, applies an
/// independent uniformly drawn dihedral transform to each. Per-sample
/// gradients are summed in batch order and divided by the batch size.
/// `on_epoch` sees each record as soon as it is produced.
pub fn train(
    params: &mut ModelParams,
    patches: &[Tensor],
    validation: &[ValidationPair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if patches.is_empty() {
        return Err(N2kError::config("training set contains no patches"));
    }
    let mut state = OptimState::new(config.optim, params.num_parameters());
    let mut records = Vec::with_capacity(config.train.epochs);

    for epoch in 0..config.train.epochs {
        let mut r = rng(stream_seed(config.seed, STREAM_EPOCH, epoch as u64));
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut r);
        let jobs: Vec<(usize, usize, u64)> = order
            .into_iter()
            .map(|i| {
                let t = if config.data.augment {
                    r.random_range(0..GROUP_ORDER)
                } else {
                    0
                };
                (i, t, r.random())
            })
            .collect();

        let mut loss_sum = 0.0;
        for batch in jobs.chunks(config.train.batch_size) {
            let results: Vec<(f64, ParamGrads)> = batch
                .par_iter()
                .map(|&(i, t, seed)| {
                    let x = augment_dihedral(&patches[i], t)?;
                    sample_grads(params, &x, &config.loss, seed)
                })
                .collect::<Result<_>>()?;
            let mut total = ParamGrads::zeros_like(params);
            for (loss, g) in &results {
                loss_sum += loss;
                total.add_assign(g)?;
            }
            total.scale(1.0 / batch.len() as f64);
            radam_step(&mut state, params, &total)?;
        }

        let eval = validate(params, validation)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / patches.len() as f64,
            lr: config.optim.lr_at(state.t.max(1)),
            psnr: eval.map(|e| e.psnr),
            ssim: eval.map(|e| e.ssim),
            mean_shift: eval.map(|e| e.mean_shift),
        };
        on_epoch(&record)?;
        records.push(record);
    }
    Ok(records)
}

/// Predicts a full image, optionally averaging over the eight dihedral views.
pub fn denoise(params: &ModelParams, x: &Tensor, tta: bool) -> Result<Tensor> {
    if tta {
        crate::metrics::tta_denoise(params, x)
    } else {
        forward(params, x)
    }
}
