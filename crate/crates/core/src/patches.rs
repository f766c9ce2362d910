use rand::Rng;

use crate::error::{N2kError, Result};
use crate::noise::rng;
use crate::tensor::{Shape, Tensor};

/// Number of patches [`extract_patches`] returns:
/// `((H - P) / stride + 1) * ((W - P) / stride + 1)`.
pub fn patch_count(height: usize, width: usize, patch: usize, stride: usize) -> usize {
    if patch == 0 || stride == 0 || height < patch || width < patch {
        return 0;
    }
    ((height - patch) / stride + 1) * ((width - patch) / stride + 1)
}

/// Square patches on a regular grid of step `stride`. The grid origin is
/// shifted by a seeded random amount within the slack the grid leaves at the
/// bottom/right edge, so every patch lies inside the image.
pub fn extract_patches(
    image: &Tensor,
    patch: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let s = image.shape();
    if patch == 0 || stride == 0 {
        return Err(N2kError::config("patch size and stride must be positive"));
    }
    if s.height < patch || s.width < patch {
        return Err(N2kError::config(format!(
            "image {}x{} is smaller than patch size {patch}",
            s.height, s.width
        )));
    }
    let ny = (s.height - patch) / stride + 1;
    let nx = (s.width - patch) / stride + 1;
    let mut rng = rng(seed);
    let oy = rng.random_range(0..=s.height - patch - (ny - 1) * stride);
    let ox = rng.random_range(0..=s.width - patch - (nx - 1) * stride);
    let mut out = Vec::with_capacity(ny * nx * s.batch);
    for b in 0..s.batch {
        for gy in 0..ny {
            for gx in 0..nx {
                let (y0, x0) = (oy + gy * stride, ox + gx * stride);
                let mut p = Tensor::zeros(Shape::new(1, s.channels, patch, patch));
                for c in 0..s.channels {
                    let src = image.plane(b, c);
                    let dst = p.plane_mut(0, c);
                    for i in 0..patch {
                        let row = (y0 + i) * s.width + x0;
                        dst[i * patch..(i + 1) * patch].copy_from_slice(&src[row..row + patch]);
                    }
                }
                out.push(p);
            }
        }
    }
    Ok(out)
}
