//! Dilated 2-D convolution with zero padding and optional blind-spot ("donut") kernels.
//!
//! Per output element the accumulation order is fixed: bias first, then input
//! channel, kernel row, kernel column. Work is only ever split across whole
//! output planes, so results do not depend on the rayon pool size.

use rayon::prelude::*;

use crate::error::{N2kError, Result};
use crate::tensor::{Shape, Tensor};

/// Square convolution kernel with `out x in x K x K` weights.
///
/// When `donut` is set, the center tap of every filter is exactly zero and is
/// never read by the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    bias: Vec<f64>,
    dilation: usize,
    donut: bool,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Vec<f64>, dilation: usize, donut: bool) -> Result<Self> {
        let s = weights.shape();
        if s.height != s.width {
            return Err(N2kError::config(format!("kernel must be square, got {s}")));
        }
        if s.height.is_multiple_of(2) {
            return Err(N2kError::config(format!(
                "kernel size must be odd, got {}",
                s.height
            )));
        }
        if bias.len() != s.batch {
            return Err(N2kError::config(format!(
                "bias has {} entries for {} output channels",
                bias.len(),
                s.batch
            )));
        }
        if dilation == 0 {
            return Err(N2kError::config("dilation must be positive"));
        }
        if donut && s.height < 3 {
            return Err(N2kError::config("a donut kernel needs K >= 3"));
        }
        let mut kernel = ConvKernel {
            weights,
            bias,
            dilation,
            donut,
        };
        if donut {
            kernel.enforce_donut();
        }
        Ok(kernel)
    }

    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        size: usize,
        dilation: usize,
        donut: bool,
    ) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape::new(out_channels, in_channels, size, size)),
            vec![0.0; out_channels],
            dilation,
            donut,
        )
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Mutable weight access. Callers that touch a donut kernel must call
    /// [`ConvKernel::enforce_donut`] afterwards.
    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn is_donut(&self) -> bool {
        self.donut
    }

    pub fn size(&self) -> usize {
        self.weights.shape().height
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().batch
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().channels
    }

    /// Zeroes the center tap of every filter. No-op for ordinary kernels.
    pub fn enforce_donut(&mut self) {
        if !self.donut {
            return;
        }
        let s = self.weights.shape();
        let r = s.height / 2;
        for o in 0..s.batch {
            for c in 0..s.channels {
                self.weights.set(o, c, r, r, 0.0);
            }
        }
    }

    /// True when every center tap is exactly `+0.0` or `-0.0`.
    pub fn has_zero_center(&self) -> bool {
        let s = self.weights.shape();
        let r = s.height / 2;
        (0..s.batch).all(|o| (0..s.channels).all(|c| self.weights.get(o, c, r, r) == 0.0))
    }

    #[inline]
    fn skips(&self, p: usize, q: usize) -> bool {
        let r = self.size() / 2;
        self.donut && p == r && q == r
    }
}

/// Returns a copy of a donut-flagged kernel with its center taps zeroed.
pub fn apply_donut_mask(kernel: &ConvKernel) -> Result<ConvKernel> {
    if !kernel.is_donut() {
        return Err(N2kError::config(
            "apply_donut_mask called on a kernel without the donut flag",
        ));
    }
    let mut k = kernel.clone();
    k.enforce_donut();
    Ok(k)
}

fn check_input(input: &Tensor, kernel: &ConvKernel, op: &'static str) -> Result<()> {
    let s = input.shape();
    if s.channels != kernel.in_channels() || s.height == 0 || s.width == 0 {
        return Err(N2kError::Shape {
            op,
            left: format!("input {s}"),
            right: format!("kernel {}", kernel.weights.shape()),
        });
    }
    Ok(())
}

/// Planes copied into a zero border of `pad` pixels. Working in this layout
/// turns every kernel tap into one contiguous multiply-add over the plane:
/// position `(i, j)` of an `h x w` plane lives at `i * wp + j` of a buffer with
/// row stride `wp = w + 2 * pad`, and the columns `j >= w` are scratch.
struct Padded {
    data: Vec<f64>,
    hp: usize,
    wp: usize,
}

impl Padded {
    fn new(t: &Tensor, pad: usize) -> Padded {
        let s = t.shape();
        let (hp, wp) = (s.height + 2 * pad, s.width + 2 * pad);
        let planes = s.batch * s.channels;
        let mut data = vec![0.0; planes * hp * wp];
        data.par_chunks_mut(hp * wp)
            .enumerate()
            .for_each(|(n, dst)| {
                let src = &t.data()[n * s.plane()..(n + 1) * s.plane()];
                for (i, row) in src.chunks_exact(s.width).enumerate() {
                    let at = (i + pad) * wp + pad;
                    dst[at..at + s.width].copy_from_slice(row);
                }
            });
        Padded { data, hp, wp }
    }

    fn plane(&self, n: usize) -> &[f64] {
        &self.data[n * self.hp * self.wp..(n + 1) * self.hp * self.wp]
    }

    /// Start of the span read by tap `(p, q)` when the taps are spaced `step` apart.
    fn tap_start(&self, p: usize, q: usize, step: usize) -> usize {
        p * step * self.wp + q * step
    }
}

/// Length of the strided span covering `h` rows of width `w` at stride `wp`.
fn span(h: usize, w: usize, wp: usize) -> usize {
    (h - 1) * wp + w
}

/// Same-size dilated convolution with zero padding of `dilation * (K / 2)`.
pub fn conv2d_forward(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    check_input(input, kernel, "conv2d_forward")?;
    let s = input.shape();
    let (h, w) = (s.height, s.width);
    let (k, d) = (kernel.size(), kernel.dilation);
    let out_ch = kernel.out_channels();
    let padded = Padded::new(input, d * (k / 2));
    let wp = padded.wp;
    let len = span(h, w, wp);
    let mut out = Tensor::zeros(Shape::new(s.batch, out_ch, h, w));

    // Per output element the sum runs bias, then channel, row tap, column tap.
    out.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, o) = (idx / out_ch, idx % out_ch);
            let mut acc = vec![kernel.bias[o]; len];
            let mut taps = Vec::with_capacity(k * k);
            for c in 0..s.channels {
                let src = padded.plane(b * s.channels + c);
                taps.clear();
                for p in 0..k {
                    for q in 0..k {
                        if !kernel.skips(p, q) {
                            let at = padded.tap_start(p, q, d);
                            taps.push((kernel.weights.get(o, c, p, q), &src[at..at + len]));
                        }
                    }
                }
                multiply_add(&mut acc, &taps);
            }
            for (i, row) in plane.chunks_exact_mut(w).enumerate() {
                row.copy_from_slice(&acc[i * wp..i * wp + w]);
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to its input, weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Exact adjoint of [`conv2d_forward`]. Donut center weight gradients are zero.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &ConvKernel,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let input_grad = conv2d_backward_input(kernel, grad_out, input.shape())?;
    let (weights, bias) = conv2d_backward_params(input, kernel, grad_out)?;
    Ok(ConvGrads {
        input: input_grad,
        weights,
        bias,
    })
}

fn check_grad(input_shape: Shape, kernel: &ConvKernel, grad_out: &Tensor) -> Result<()> {
    let expected = Shape::new(
        input_shape.batch,
        kernel.out_channels(),
        input_shape.height,
        input_shape.width,
    );
    if grad_out.shape() != expected {
        return Err(N2kError::Shape {
            op: "conv2d_backward",
            left: format!("grad_out {}", grad_out.shape()),
            right: format!("expected {expected}"),
        });
    }
    Ok(())
}

/// Gradient with respect to the input only.
pub fn conv2d_backward_input(
    kernel: &ConvKernel,
    grad_out: &Tensor,
    input_shape: Shape,
) -> Result<Tensor> {
    if input_shape.channels != kernel.in_channels() {
        return Err(N2kError::Shape {
            op: "conv2d_backward",
            left: format!("input {input_shape}"),
            right: format!("kernel {}", kernel.weights.shape()),
        });
    }
    check_grad(input_shape, kernel, grad_out)?;
    let (h, w) = (input_shape.height, input_shape.width);
    let (k, d) = (kernel.size(), kernel.dilation);
    let in_ch = input_shape.channels;
    let out_ch = kernel.out_channels();
    let padded = Padded::new(grad_out, d * (k / 2));
    let wp = padded.wp;
    let len = span(h, w, wp);
    let mut grad_in = Tensor::zeros(input_shape);

    // in[y, x] received out[y - dy, x - dx] * weight, so tap (p, q) reads the
    // padded gradient at the mirrored tap (k - 1 - p, k - 1 - q).
    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, c) = (idx / in_ch, idx % in_ch);
            let mut acc = vec![0.0; len];
            let mut taps = Vec::with_capacity(k * k);
            for o in 0..out_ch {
                let g = padded.plane(b * out_ch + o);
                taps.clear();
                for p in 0..k {
                    for q in 0..k {
                        if !kernel.skips(p, q) {
                            let at = padded.tap_start(k - 1 - p, k - 1 - q, d);
                            taps.push((kernel.weights.get(o, c, p, q), &g[at..at + len]));
                        }
                    }
                }
                multiply_add(&mut acc, &taps);
            }
            for (i, row) in plane.chunks_exact_mut(w).enumerate() {
                row.copy_from_slice(&acc[i * wp..i * wp + w]);
            }
        });
    Ok(grad_in)
}

/// Gradients with respect to the weights and bias only.
pub fn conv2d_backward_params(
    input: &Tensor,
    kernel: &ConvKernel,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    check_input(input, kernel, "conv2d_backward")?;
    check_grad(input.shape(), kernel, grad_out)?;
    let s = input.shape();
    let (h, w) = (s.height, s.width);
    let (k, d) = (kernel.size(), kernel.dilation);
    let out_ch = kernel.out_channels();
    let in_ch = s.channels;

    let bias: Vec<f64> = (0..out_ch)
        .map(|o| {
            (0..s.batch)
                .map(|b| grad_out.plane(b, o).iter().sum::<f64>())
                .sum()
        })
        .collect();

    let padded = Padded::new(input, d * (k / 2));
    let wp = padded.wp;
    let len = span(h, w, wp);
    // grad_out in the same strided layout, zero in the scratch columns so the
    // out-of-image reads they line up with drop out of the dot products.
    let strided: Vec<Vec<f64>> = (0..s.batch * out_ch)
        .into_par_iter()
        .map(|n| {
            let mut buf = vec![0.0; len];
            let src = &grad_out.data()[n * h * w..(n + 1) * h * w];
            for (i, row) in src.chunks_exact(w).enumerate() {
                buf[i * wp..i * wp + w].copy_from_slice(row);
            }
            buf
        })
        .collect();

    let mut weights = Tensor::zeros(kernel.weights.shape());
    weights
        .data_mut()
        .par_chunks_mut(k * k)
        .enumerate()
        .for_each(|(idx, out)| {
            let (o, c) = (idx / in_ch, idx % in_ch);
            let mut slots = Vec::with_capacity(k * k);
            let mut sums = vec![0.0; k * k];
            for b in 0..s.batch {
                let x = padded.plane(b * in_ch + c);
                let mut taps = Vec::with_capacity(k * k);
                slots.clear();
                for p in 0..k {
                    for q in 0..k {
                        if !kernel.skips(p, q) {
                            let at = padded.tap_start(p, q, d);
                            taps.push(&x[at..at + len]);
                            slots.push(p * k + q);
                        }
                    }
                }
                let dots = multi_dot(&strided[b * out_ch + o], &taps);
                for (&slot, v) in slots.iter().zip(dots) {
                    sums[slot] += v;
                }
            }
            out.copy_from_slice(&sums);
        });
    Ok((weights, bias))
}

const BLOCK: usize = 8;

/// `acc[n] += w * src[n]` for each `(w, src)` in order. Every element sees the
/// same sequence of additions as separate passes would, but `acc` is loaded and
/// stored once per block instead of once per tap.
fn multiply_add(acc: &mut [f64], taps: &[(f64, &[f64])]) {
    let len = acc.len();
    let mut n = 0;
    while n + BLOCK <= len {
        let mut a: [f64; BLOCK] = acc[n..n + BLOCK].try_into().unwrap();
        for &(w, src) in taps {
            let s = &src[n..n + BLOCK];
            for l in 0..BLOCK {
                a[l] += w * s[l];
            }
        }
        acc[n..n + BLOCK].copy_from_slice(&a);
        n += BLOCK;
    }
    for m in n..len {
        let mut a = acc[m];
        for &(w, src) in taps {
            a += w * src[m];
        }
        acc[m] = a;
    }
}

/// `g . src` for every `src` in `taps`. Each dot keeps `BLOCK` lane sums
/// reduced pairwise at the end, then adds the tail; the order is fixed, so
/// results do not depend on the machine.
fn multi_dot(g: &[f64], taps: &[&[f64]]) -> Vec<f64> {
    taps.iter().map(|src| dot(g, src)).collect()
}

#[inline]
fn dot(g: &[f64], src: &[f64]) -> f64 {
    let mut acc = [0.0; BLOCK];
    let (cg, cs) = (g.chunks_exact(BLOCK), src[..g.len()].chunks_exact(BLOCK));
    let tail = cg.len() * BLOCK;
    for (a, b) in cg.zip(cs) {
        for l in 0..BLOCK {
            acc[l] += a[l] * b[l];
        }
    }
    let head = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    (tail..g.len()).fold(head, |t, m| t + g[m] * src[m])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel(k: usize, d: usize, donut: bool) -> ConvKernel {
        ConvKernel::new(
            Tensor::full(Shape::new(1, 1, k, k), 1.0),
            vec![0.0],
            d,
            donut,
        )
        .unwrap()
    }

    #[test]
    fn donut_on_ones_sums_eight_neighbours() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d_forward(&x, &ones_kernel(3, 1, true)).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 8.0);
        // corners see three in-range neighbours
        assert_eq!(y.get(0, 0, 0, 0), 3.0);
    }

    #[test]
    fn pointwise_identity_is_bit_exact() {
        let x = Tensor::from_vec(
            Shape::new(2, 1, 3, 4),
            (0..24).map(|v| (v as f64).sin() * 1e3).collect(),
        )
        .unwrap();
        let id = ConvKernel::new(
            Tensor::full(Shape::new(1, 1, 1, 1), 1.0),
            vec![0.0],
            1,
            false,
        )
        .unwrap();
        assert!(conv2d_forward(&x, &id).unwrap().bit_eq(&x));
    }

    #[test]
    fn dilated_impulse_response() {
        let mut x = Tensor::zeros(Shape::new(1, 1, 5, 5));
        x.set(0, 0, 2, 2, 1.0);
        for donut in [false, true] {
            let y = conv2d_forward(&x, &ones_kernel(3, 2, donut)).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let on_stencil = i % 2 == 0 && j % 2 == 0;
                    let expected = if (i, j) == (2, 2) {
                        if donut {
                            0.0
                        } else {
                            1.0
                        }
                    } else if on_stencil {
                        1.0
                    } else {
                        0.0
                    };
                    assert_eq!(y.get(0, 0, i, j), expected, "({i},{j}) donut={donut}");
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let err = conv2d_forward(&x, &ones_kernel(3, 1, false))
            .unwrap_err()
            .to_string();
        assert!(err.contains("1x2x4x4") && err.contains("1x1x3x3"), "{err}");
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(ConvKernel::zeros(1, 1, 2, 1, false).is_err());
        assert!(ConvKernel::zeros(1, 1, 3, 0, false).is_err());
    }

    #[test]
    fn donut_mask_zeroes_only_center() {
        let mut k = ConvKernel::zeros(2, 2, 5, 1, false).unwrap();
        k.weights_mut().data_mut().fill(1.0);
        let raw = k.weights().clone();
        let masked = ConvKernel::new(raw, vec![0.0; 2], 1, true).unwrap();
        let again = apply_donut_mask(&masked).unwrap();
        assert_eq!(again, masked);
        for o in 0..2 {
            for c in 0..2 {
                for p in 0..5 {
                    for q in 0..5 {
                        let v = masked.weights().get(o, c, p, q);
                        assert_eq!(v, if (p, q) == (2, 2) { 0.0 } else { 1.0 });
                    }
                }
            }
        }
        assert!(apply_donut_mask(&ones_kernel(3, 1, false)).is_err());
    }

    #[test]
    fn three_by_three_mask_sums_to_eight() {
        let k = ones_kernel(3, 1, true);
        assert_eq!(k.weights().sum(), 8.0);
        assert!(k.has_zero_center());
    }

    #[test]
    fn scalar_backward_is_chain_rule() {
        let (w, v, g) = (1.5, -2.0, 0.75);
        let k =
            ConvKernel::new(Tensor::full(Shape::new(1, 1, 1, 1), w), vec![0.3], 1, false).unwrap();
        let x = Tensor::full(Shape::new(1, 1, 1, 1), v);
        let go = Tensor::full(Shape::new(1, 1, 1, 1), g);
        let grads = conv2d_backward(&x, &k, &go).unwrap();
        assert_eq!(grads.input.data(), &[w * g]);
        assert_eq!(grads.weights.data(), &[v * g]);
        assert_eq!(grads.bias, vec![g]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut k = ConvKernel::zeros(2, 3, 3, 2, true).unwrap();
        k.weights_mut()
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64);
        k.enforce_donut();
        let x = Tensor::full(Shape::new(2, 3, 5, 4), 0.5);
        let go = Tensor::zeros(Shape::new(2, 2, 5, 4));
        let grads = conv2d_backward(&x, &k, &go).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_bad_grad_shape() {
        let k = ones_kernel(3, 1, false);
        let x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let go = Tensor::zeros(Shape::new(1, 1, 4, 5));
        assert!(conv2d_backward(&x, &k, &go).is_err());
    }
}
