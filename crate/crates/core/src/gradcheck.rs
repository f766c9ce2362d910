//! Central finite-difference checks of every differentiable operation.
//!
//! A coordinate passes when `|analytic - numeric| <= rtol * max(|analytic|,
//! |numeric|) + ATOL`. Probes whose `+h`/`-h` evaluations land on different
//! sides of a kink (leaky ReLU, `|r|`, TV ties) are skipped and redrawn.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::activation::{activation_backward, activation_forward, Activation};
use crate::conv::{conv2d_backward, conv2d_forward, ConvKernel};
use crate::error::Result;
use crate::loss::{adss_loss_with, l2_self_loss, masked_l2_loss, tv_term, PixelMask, WeightGrad};
use crate::net::{
    backward, build_default_n2k, forward_trace, init_params, ArchConfig, ModelParams, NetworkSpec,
};
use crate::noise::{derive_seed, rng};
use crate::tensor::{Shape, Tensor};

pub const OPS_RTOL: f64 = 1e-5;
pub const NETWORK_RTOL: f64 = 1e-4;
/// Absolute slack for the rounding error of the central difference itself.
pub const ATOL: f64 = 1e-8;
const STEP: f64 = 1e-6;
const PROBES_PER_CASE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub rtol: f64,
    pub cases: usize,
    pub probes: usize,
    pub skipped: usize,
    pub failures: usize,
    /// Largest `|analytic - numeric| / (rtol * scale + ATOL)`; at most 1 when passing.
    pub worst: f64,
}

impl CheckSummary {
    fn new(name: &str, rtol: f64) -> Self {
        CheckSummary {
            name: name.into(),
            rtol,
            cases: 0,
            probes: 0,
            skipped: 0,
            failures: 0,
            worst: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.probes > 0
    }
}

impl std::fmt::Display for CheckSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} {} cases={} probes={} skipped={} failures={} worst={:.3} (rtol {:e})",
            self.name,
            if self.passed() { "ok  " } else { "FAIL" },
            self.cases,
            self.probes,
            self.skipped,
            self.failures,
            self.worst,
            self.rtol
        )
    }
}

/// Scalar objective plus a signature of its kinks at the evaluation point.
type Objective<'a> = dyn Fn(&[f64]) -> Result<(f64, Vec<bool>)> + 'a;

fn probe(
    summary: &mut CheckSummary,
    f: &Objective,
    theta: &[f64],
    analytic: &[f64],
    coord: usize,
) -> Result<bool> {
    let h = STEP * theta[coord].abs().max(1.0);
    let mut plus = theta.to_vec();
    plus[coord] += h;
    let mut minus = theta.to_vec();
    minus[coord] -= h;
    let (_, base_sig) = f(theta)?;
    let (fp, sp) = f(&plus)?;
    let (fm, sm) = f(&minus)?;
    if sp != base_sig || sm != base_sig {
        summary.skipped += 1;
        return Ok(false);
    }
    let numeric = (fp - fm) / (plus[coord] - minus[coord]);
    let a = analytic[coord];
    let ratio = (a - numeric).abs() / (summary.rtol * a.abs().max(numeric.abs()) + ATOL);
    summary.probes += 1;
    summary.worst = summary.worst.max(ratio);
    if ratio.is_nan() || ratio > 1.0 {
        summary.failures += 1;
    }
    Ok(true)
}

/// Probes `PROBES_PER_CASE` random coordinates, redrawing skipped ones a bounded
/// number of times.
fn probe_case(
    summary: &mut CheckSummary,
    f: &Objective,
    theta: &[f64],
    analytic: &[f64],
    r: &mut impl Rng,
) -> Result<()> {
    summary.cases += 1;
    let mut done = 0;
    for _ in 0..PROBES_PER_CASE * 4 {
        if done == PROBES_PER_CASE {
            break;
        }
        if probe(summary, f, theta, analytic, r.random_range(0..theta.len()))? {
            done += 1;
        }
    }
    Ok(())
}

fn normal_vec(n: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn signs(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|&v| v > 0.0).collect()
}

fn random_kernel(r: &mut impl Rng) -> Result<ConvKernel> {
    let donut = r.random_bool(0.5);
    let size = if donut {
        *[3, 5].get(r.random_range(0..2)).unwrap()
    } else {
        *[1, 3].get(r.random_range(0..2)).unwrap()
    };
    let (o, c) = (r.random_range(1..4), r.random_range(1..4));
    let dilation = if size == 1 { 1 } else { r.random_range(1..4) };
    let w = Tensor::from_vec(
        Shape::new(o, c, size, size),
        normal_vec(o * c * size * size, r),
    )?;
    ConvKernel::new(w, normal_vec(o, r), dilation, donut)
}

/// Convolution: input, weight and bias gradients of `<R, conv(x)>`.
pub fn check_conv(seed: u64, cases: usize) -> Result<Vec<CheckSummary>> {
    let mut r = rng(seed);
    let mut out = vec![
        CheckSummary::new("conv2d/input", OPS_RTOL),
        CheckSummary::new("conv2d/weights", OPS_RTOL),
        CheckSummary::new("conv2d/bias", OPS_RTOL),
    ];
    for _ in 0..cases {
        let kernel = random_kernel(&mut r)?;
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let shape = Shape::new(r.random_range(1..3), kernel.in_channels(), h, w);
        let x = Tensor::from_vec(shape, normal_vec(shape.numel(), &mut r))?;
        let y = conv2d_forward(&x, &kernel)?;
        let probe_w = Tensor::from_vec(y.shape(), normal_vec(y.len(), &mut r))?;
        let grads = conv2d_backward(&x, &kernel, &probe_w)?;

        let f_x = |v: &[f64]| -> Result<(f64, Vec<bool>)> {
            let xi = Tensor::from_vec(shape, v.to_vec())?;
            Ok((
                dot(conv2d_forward(&xi, &kernel)?.data(), probe_w.data()),
                vec![],
            ))
        };
        probe_case(&mut out[0], &f_x, x.data(), grads.input.data(), &mut r)?;

        let f_w = |v: &[f64]| -> Result<(f64, Vec<bool>)> {
            let mut k = kernel.clone();
            k.weights_mut().data_mut().copy_from_slice(v);
            Ok((dot(conv2d_forward(&x, &k)?.data(), probe_w.data()), vec![]))
        };
        // Donut centers are not free parameters; probe the others only.
        let mut theta = kernel.weights().data().to_vec();
        let mut analytic = grads.weights.data().to_vec();
        if kernel.is_donut() {
            let k = kernel.size();
            let (c, center) = (k * k, (k / 2) * k + k / 2);
            let keep: Vec<usize> = (0..theta.len()).filter(|i| i % c != center).collect();
            let f_sub = |v: &[f64]| -> Result<(f64, Vec<bool>)> {
                let mut full = kernel.weights().data().to_vec();
                for (&i, &x) in keep.iter().zip(v) {
                    full[i] = x;
                }
                f_w(&full)
            };
            theta = keep.iter().map(|&i| theta[i]).collect();
            analytic = keep.iter().map(|&i| analytic[i]).collect();
            probe_case(&mut out[1], &f_sub, &theta, &analytic, &mut r)?;
        } else {
            probe_case(&mut out[1], &f_w, &theta, &analytic, &mut r)?;
        }

        let f_b = |v: &[f64]| -> Result<(f64, Vec<bool>)> {
            let mut k = kernel.clone();
            k.bias_mut().copy_from_slice(v);
            Ok((dot(conv2d_forward(&x, &k)?.data(), probe_w.data()), vec![]))
        };
        probe_case(&mut out[2], &f_b, kernel.bias(), &grads.bias, &mut r)?;
    }
    Ok(out)
}

pub fn check_activation(seed: u64, cases: usize) -> Result<CheckSummary> {
    let mut r = rng(seed);
    let mut out = CheckSummary::new("leaky_relu", OPS_RTOL);
    for _ in 0..cases {
        let kind = Activation::LeakyRelu {
            slope: r.random_range(0.0..0.5),
        };
        let shape = Shape::new(
            1,
            r.random_range(1..3),
            r.random_range(1..6),
            r.random_range(1..6),
        );
        let x = Tensor::from_vec(shape, normal_vec(shape.numel(), &mut r))?;
        let pw = normal_vec(shape.numel(), &mut r);
        let g = activation_backward(&x, &Tensor::from_vec(shape, pw.clone())?, kind)?;
        let f = |v: &[f64]| -> Result<(f64, Vec<bool>)> {
            let xi = Tensor::from_vec(shape, v.to_vec())?;
            Ok((dot(activation_forward(&xi, kind).data(), &pw), signs(&xi)))
        };
        probe_case(&mut out, &f, x.data(), g.data(), &mut r)?;
    }
    Ok(out)
}

/// L2, ADSS in both weight modes, and TV, each with respect to the prediction.
pub fn check_losses(seed: u64, cases: usize) -> Result<Vec<CheckSummary>> {
    let mut r = rng(seed);
    let mut out = vec![
        CheckSummary::new("l2_self", OPS_RTOL),
        CheckSummary::new("adss/attached", OPS_RTOL),
        CheckSummary::new("adss/detached", OPS_RTOL),
        CheckSummary::new("tv", OPS_RTOL),
    ];
    for _ in 0..cases {
        let shape = Shape::new(1, 1, r.random_range(2..8), r.random_range(2..8));
        let x = Tensor::from_vec(shape, (0..shape.numel()).map(|_| r.random()).collect())?;
        let pred = Tensor::from_vec(shape, (0..shape.numel()).map(|_| r.random()).collect())?;
        let lambda = r.random_range(0.0..20.0);
        let alpha = r.random_range(0.01..1.0);
        let mk = |v: &[f64]| Tensor::from_vec(shape, v.to_vec());
        let residual_signs =
            |v: &[f64]| -> Vec<bool> { v.iter().zip(x.data()).map(|(p, t)| p > t).collect() };

        let g = l2_self_loss(&pred, &x)?.grad;
        let f = |v: &[f64]| Ok((l2_self_loss(&mk(v)?, &x)?.loss, vec![]));
        probe_case(&mut out[0], &f, pred.data(), g.data(), &mut r)?;

        let g = adss_loss_with(&pred, &x, lambda, WeightGrad::Attached)?.grad;
        let f = |v: &[f64]| {
            Ok((
                adss_loss_with(&mk(v)?, &x, lambda, WeightGrad::Attached)?.loss,
                residual_signs(v),
            ))
        };
        probe_case(&mut out[1], &f, pred.data(), g.data(), &mut r)?;

        // Detached: the gradient is that of the weighted L2 with weights frozen at `pred`.
        let g = adss_loss_with(&pred, &x, lambda, WeightGrad::Detached)?.grad;
        let w: Vec<f64> = pred
            .data()
            .iter()
            .zip(x.data())
            .map(|(p, t)| crate::loss::adss_weight(p - t, lambda))
            .collect();
        let f = |v: &[f64]| {
            let s: f64 = v
                .iter()
                .zip(x.data())
                .zip(&w)
                .map(|((p, t), w)| w * (p - t) * (p - t))
                .sum();
            Ok((s / v.len() as f64, vec![]))
        };
        probe_case(&mut out[2], &f, pred.data(), g.data(), &mut r)?;

        let g = tv_term(&pred, alpha)?.grad;
        let f = |v: &[f64]| {
            let t = mk(v)?;
            Ok((tv_term(&t, alpha)?.loss, tv_signs(&t)))
        };
        probe_case(&mut out[3], &f, pred.data(), g.data(), &mut r)?;
    }
    Ok(out)
}

fn tv_signs(t: &Tensor) -> Vec<bool> {
    let s = t.shape();
    let mut out = Vec::new();
    for i in 0..s.height {
        for j in 0..s.width {
            let v = t.get(0, 0, i, j);
            if j + 1 < s.width {
                out.push(t.get(0, 0, i, j + 1) > v);
            }
            if i + 1 < s.height {
                out.push(t.get(0, 0, i + 1, j) > v);
            }
        }
    }
    out
}

fn network_objective<'a>(
    params: &'a ModelParams,
    x: &'a Tensor,
    probe_w: &'a [f64],
) -> impl Fn(&[f64]) -> Result<(f64, Vec<bool>)> + 'a {
    move |v: &[f64]| {
        let mut p = params.clone();
        p.assign_flat(v)?;
        let trace = forward_trace(&p, x)?;
        let value = dot(trace.output().data(), probe_w) / probe_w.len() as f64;
        Ok((value, trace.node_values().flat_map(signs).collect()))
    }
}

/// Parameter gradients of the full network under `<R, f(x)> / n`.
pub fn check_network(
    spec: &NetworkSpec,
    name: &str,
    size: usize,
    seed: u64,
    cases: usize,
) -> Result<CheckSummary> {
    let mut r = rng(seed);
    let mut out = CheckSummary::new(name, NETWORK_RTOL);
    for case in 0..cases {
        let mut params = init_params(spec, derive_seed(seed, case as u64))?;
        // Nonzero biases so that bias gradients are exercised away from zero.
        for k in &mut params.kernels {
            for b in k.bias_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *b = 0.1 * z;
            }
        }
        let x = Tensor::image(size, size, (0..size * size).map(|_| r.random()).collect())?;
        let probe_w = normal_vec(size * size, &mut r);
        let grad_out = Tensor::from_vec(
            x.shape(),
            probe_w.iter().map(|v| v / probe_w.len() as f64).collect(),
        )?;
        let grads = backward(&params, &forward_trace(&params, &x)?, &grad_out)?;
        let theta = params.flatten();
        let analytic = grads.flatten();
        let f = network_objective(&params, &x, &probe_w);
        // Donut centers are structurally absent; their analytic gradient is zero
        // and perturbing them would break the architecture, so skip them.
        let free = free_coordinates(&params);
        let f_sub = |v: &[f64]| {
            let mut full = theta.clone();
            for (&i, &x) in free.iter().zip(v) {
                full[i] = x;
            }
            f(&full)
        };
        let theta_sub: Vec<f64> = free.iter().map(|&i| theta[i]).collect();
        let analytic_sub: Vec<f64> = free.iter().map(|&i| analytic[i]).collect();
        probe_case(&mut out, &f_sub, &theta_sub, &analytic_sub, &mut r)?;
    }
    Ok(out)
}

/// Flat indices of every parameter except donut center taps.
fn free_coordinates(params: &ModelParams) -> Vec<usize> {
    let mut out = Vec::new();
    let mut at = 0;
    for k in &params.kernels {
        let size = k.size();
        let taps = size * size;
        let center = (size / 2) * size + size / 2;
        for i in 0..k.weights().len() {
            if !(k.is_donut() && i % taps == center) {
                out.push(at + i);
            }
        }
        at += k.weights().len() + k.bias().len();
        out.extend(at - k.bias().len()..at);
    }
    out
}

/// Masked-L2 baseline, whose gradient runs through the network.
pub fn check_masked_loss(seed: u64, cases: usize) -> Result<CheckSummary> {
    let mut r = rng(seed);
    let mut out = CheckSummary::new("masked_l2/network", NETWORK_RTOL);
    let spec = NetworkSpec::two_path(&ArchConfig {
        channel_width: 4,
        path_depth: 1,
        ..ArchConfig::default()
    })?;
    for case in 0..cases {
        let params = init_params(&spec, derive_seed(seed, case as u64))?;
        let x = Tensor::image(8, 8, (0..64).map(|_| r.random()).collect())?;
        let mut mask = PixelMask::random(x.shape(), 0.3, &mut r);
        if mask.count() == 0 {
            mask = PixelMask::all(x.shape());
        }
        let analytic = masked_l2_loss(&params, &x, &mask)?.grads.flatten();
        let theta = params.flatten();
        let blanked = mask.blank(&x)?;
        let free = free_coordinates(&params);
        let f = |v: &[f64]| {
            let mut full = theta.clone();
            for (&i, &x) in free.iter().zip(v) {
                full[i] = x;
            }
            let mut p = params.clone();
            p.assign_flat(&full)?;
            let loss = masked_l2_loss(&p, &x, &mask)?.loss;
            let sig = forward_trace(&p, &blanked)?
                .node_values()
                .flat_map(signs)
                .collect();
            Ok((loss, sig))
        };
        let theta_sub: Vec<f64> = free.iter().map(|&i| theta[i]).collect();
        let analytic_sub: Vec<f64> = free.iter().map(|&i| analytic[i]).collect();
        probe_case(&mut out, &f, &theta_sub, &analytic_sub, &mut r)?;
    }
    Ok(out)
}

/// The complete suite with `cases` random cases per check. The default
/// network is checked on a 24 x 24 image.
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<CheckSummary>> {
    let mut out = check_conv(derive_seed(seed, 0), cases)?;
    out.push(check_activation(derive_seed(seed, 1), cases)?);
    out.extend(check_losses(derive_seed(seed, 2), cases)?);
    out.push(check_masked_loss(derive_seed(seed, 3), cases)?);
    out.push(check_network(
        &build_default_n2k(32, 4)?,
        "network/default",
        24,
        derive_seed(seed, 4),
        cases,
    )?);
    Ok(out)
}
