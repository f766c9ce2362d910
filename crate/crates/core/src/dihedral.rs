//! The eight rotations and reflections of the square, applied per image plane.
//!
//! Index `k` is `rot90^(k % 4) ∘ mirror^(k / 4)`: mirror left-right first when
//! `k >= 4`, then rotate counter-clockwise `k % 4` quarter turns. Rotations by
//! an odd number of quarter turns swap height and width.

use crate::error::{N2kError, Result};
use crate::tensor::{Shape, Tensor};

pub const GROUP_ORDER: usize = 8;

fn check_index(index: usize) -> Result<()> {
    if index >= GROUP_ORDER {
        return Err(N2kError::config(format!(
            "dihedral index must be in 0..8, got {index}"
        )));
    }
    Ok(())
}

fn map_planes(
    t: &Tensor,
    out_hw: (usize, usize),
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Tensor {
    let s = t.shape();
    let (oh, ow) = out_hw;
    let mut out = Tensor::zeros(Shape::new(s.batch, s.channels, oh, ow));
    for b in 0..s.batch {
        for c in 0..s.channels {
            let p = t.plane(b, c);
            let q = out.plane_mut(b, c);
            for i in 0..oh {
                for j in 0..ow {
                    let (si, sj) = src(i, j);
                    q[i * ow + j] = p[si * s.width + sj];
                }
            }
        }
    }
    out
}

/// Left-right mirror.
pub fn mirror(t: &Tensor) -> Tensor {
    let w = t.shape().width;
    map_planes(t, (t.shape().height, w), |i, j| (i, w - 1 - j))
}

/// Quarter turn counter-clockwise.
pub fn rot90(t: &Tensor) -> Tensor {
    let s = t.shape();
    map_planes(t, (s.width, s.height), |i, j| (j, s.width - 1 - i))
}

fn rot90_n(t: &Tensor, n: usize) -> Tensor {
    let mut out = t.clone();
    for _ in 0..n % 4 {
        out = rot90(&out);
    }
    out
}

pub fn augment_dihedral(t: &Tensor, index: usize) -> Result<Tensor> {
    check_index(index)?;
    let base = if index >= 4 { mirror(t) } else { t.clone() };
    Ok(rot90_n(&base, index % 4))
}

/// Exact inverse of [`augment_dihedral`] with the same index.
pub fn invert_dihedral(t: &Tensor, index: usize) -> Result<Tensor> {
    check_index(index)?;
    let unrotated = rot90_n(t, (4 - index % 4) % 4);
    Ok(if index >= 4 {
        mirror(&unrotated)
    } else {
        unrotated
    })
}

/// Index of the inverse element.
pub fn inverse_index(index: usize) -> usize {
    if index >= 4 {
        index
    } else {
        (4 - index) % 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn asym(h: usize, w: usize) -> Tensor {
        Tensor::image(h, w, (0..h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn identity_and_inverse() {
        let x = asym(3, 5);
        assert!(augment_dihedral(&x, 0).unwrap().bit_eq(&x));
        for k in 0..8 {
            let y = augment_dihedral(&x, k).unwrap();
            assert!(invert_dihedral(&y, k).unwrap().bit_eq(&x), "k={k}");
            assert!(
                augment_dihedral(&y, inverse_index(k)).unwrap().bit_eq(&x),
                "k={k}"
            );
        }
        assert!(augment_dihedral(&x, 8).is_err());
    }

    #[test]
    fn rot90_layout() {
        // [[0, 1], [2, 3]] turned counter-clockwise is [[1, 3], [0, 2]]
        let y = rot90(&asym(2, 2));
        assert_eq!(y.data(), &[1.0, 3.0, 0.0, 2.0]);
        let r = rot90(&asym(2, 3));
        assert_eq!((r.shape().height, r.shape().width), (3, 2));
    }
}
