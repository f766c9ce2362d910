//! Binary checkpoint: `N2K1`, a little-endian `u32` header length, a TOML
//! header describing the network, then every weight and bias as a
//! little-endian `f32` in kernel order (weights before bias).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelParams, PARAMS_VERSION};
use super::spec::NetworkSpec;
use crate::conv::ConvKernel;
use crate::error::{N2kError, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"N2K1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    seed: u64,
    network: NetworkSpec,
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let header = Header {
        version: params.version,
        seed: params.seed,
        network: params.spec.clone(),
    };
    let text = toml::to_string(&header)
        .map_err(|e| N2kError::Checkpoint(format!("serializing header: {e}")))?;
    let mut out = Vec::with_capacity(8 + text.len() + 4 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in params.flatten() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a checkpoint, rejecting any donut kernel whose center tap is non-zero.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(N2kError::Checkpoint("missing N2K1 magic".into()));
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = bytes
        .get(8..8 + len)
        .ok_or_else(|| N2kError::Checkpoint(format!("header length {len} exceeds file")))?;
    let text = std::str::from_utf8(body)
        .map_err(|e| N2kError::Checkpoint(format!("header is not UTF-8: {e}")))?;
    let header: Header =
        toml::from_str(text).map_err(|e| N2kError::Checkpoint(format!("header: {e}")))?;
    if header.version != PARAMS_VERSION {
        return Err(N2kError::Checkpoint(format!(
            "unsupported parameter version {}",
            header.version
        )));
    }
    header.network.plan()?;
    let mut blob = bytes[8 + len..].chunks_exact(4);
    if !blob.remainder().is_empty() {
        return Err(N2kError::Checkpoint("trailing partial float".into()));
    }
    let mut next = || -> Result<f64> {
        blob.next()
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .ok_or_else(|| N2kError::Checkpoint("parameter data truncated".into()))
    };

    let mut kernels = Vec::new();
    for node in &header.network.nodes {
        let (Some((size, dilation, donut)), Some((cin, cout))) =
            (node.layer.conv_geometry(), node.layer.conv_channels())
        else {
            continue;
        };
        let shape = Shape::new(cout, cin, size, size);
        let weights = (0..shape.numel())
            .map(|_| next())
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..cout).map(|_| next()).collect::<Result<Vec<_>>>()?;
        let weights = Tensor::from_vec(shape, weights)?;
        if donut {
            let r = size / 2;
            for o in 0..cout {
                for c in 0..cin {
                    let v = weights.get(o, c, r, r);
                    if v != 0.0 {
                        return Err(N2kError::Checkpoint(format!(
                            "donut layer `{}` has center weight {v} at filter ({o}, {c})",
                            node.name
                        )));
                    }
                }
            }
        }
        kernels.push(ConvKernel::new(weights, bias, dilation, donut)?);
    }
    if next().is_ok() {
        return Err(N2kError::Checkpoint(
            "extra parameter data after last layer".into(),
        ));
    }
    Ok(ModelParams {
        spec: header.network,
        kernels,
        version: header.version,
        seed: header.seed,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)?).map_err(|e| N2kError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| N2kError::io(path, e))?;
    decode_checkpoint(&bytes)
}
