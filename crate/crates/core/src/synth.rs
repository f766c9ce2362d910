//! Procedural grayscale test images: a smooth background with overlapping
//! discs, rectangles and a few stripe patches, all drawn from a seed.

use rand::Rng;

use crate::noise::rng;
use crate::tensor::Tensor;

/// A `height x width` image with values in `[0.05, 0.95]`.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let (hf, wf) = (height as f64, width as f64);
    let base = r.random_range(0.2..0.8);
    let (gy, gx) = (r.random_range(-0.3..0.3), r.random_range(-0.3..0.3));
    let mut data: Vec<f64> = (0..height * width)
        .map(|n| {
            let (i, j) = ((n / width) as f64 / hf, (n % width) as f64 / wf);
            base + gy * (i - 0.5) + gx * (j - 0.5)
        })
        .collect();

    let shapes = r.random_range(4..9);
    for _ in 0..shapes {
        let level = r.random_range(0.05..0.95);
        let (cy, cx) = (r.random_range(0.0..hf), r.random_range(0.0..wf));
        let size = r.random_range(0.08..0.35) * hf.min(wf);
        match r.random_range(0..3) {
            0 => paint(
                &mut data,
                width,
                |i, j| (i - cy).powi(2) + (j - cx).powi(2) <= size * size,
                |_, _| level,
            ),
            1 => {
                let aspect = r.random_range(0.4..2.5);
                paint(
                    &mut data,
                    width,
                    |i, j| (i - cy).abs() <= size && (j - cx).abs() <= size * aspect,
                    |_, _| level,
                )
            }
            _ => {
                let period = r.random_range(4.0..12.0);
                let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
                let (s, c) = angle.sin_cos();
                let amp = r.random_range(0.1..0.3);
                paint(
                    &mut data,
                    width,
                    |i, j| (i - cy).abs() <= size && (j - cx).abs() <= size,
                    move |i, j| {
                        level + amp * (std::f64::consts::TAU * (i * s + j * c) / period).sin()
                    },
                )
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.05, 0.95);
    }
    Tensor::image(height, width, data).expect("length matches")
}

fn paint(
    data: &mut [f64],
    width: usize,
    inside: impl Fn(f64, f64) -> bool,
    value: impl Fn(f64, f64) -> f64,
) {
    for (n, v) in data.iter_mut().enumerate() {
        let (i, j) = ((n / width) as f64, (n % width) as f64);
        if inside(i, j) {
            *v = value(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_in_range() {
        let a = synthetic_image(40, 30, 9);
        assert!(a.bit_eq(&synthetic_image(40, 30, 9)));
        assert!(!a.bit_eq(&synthetic_image(40, 30, 10)));
        assert!(a.data().iter().all(|v| (0.05..=0.95).contains(v)));
    }
}
