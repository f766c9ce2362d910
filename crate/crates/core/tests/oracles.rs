//! Library results against independent reference computations.

use n2k_core::analyzer::{check_invariance_static, receptive_fields};
use n2k_core::conv::{conv2d_forward, ConvKernel};
use n2k_core::loss::{adss_loss, l2_self_loss, tv_term};
use n2k_core::metrics::{brightness_shift, psnr, ssim};
use n2k_core::net::{forward, init_params, ArchConfig, NetworkSpec};
use n2k_core::noise::apply_salt_pepper;
use n2k_core::optim::{OptimConfig, OptimState};
use n2k_core::synth::synthetic_image;
use n2k_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: Shape, r: &mut impl Rng) -> Tensor {
    Tensor::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| r.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Direct transcription of the convolution sum with explicit bounds checks.
fn naive_conv(x: &Tensor, w: &Tensor, bias: &[f64], d: usize, donut: bool) -> Tensor {
    let s = x.shape();
    let ws = w.shape();
    let k = ws.height as isize;
    let r = k / 2;
    let mut out = Tensor::zeros(Shape::new(s.batch, ws.batch, s.height, s.width));
    for b in 0..s.batch {
        for (o, &bias_o) in bias.iter().enumerate().take(ws.batch) {
            for i in 0..s.height as isize {
                for j in 0..s.width as isize {
                    let mut acc = bias_o;
                    for c in 0..s.channels {
                        for p in 0..k {
                            for q in 0..k {
                                if donut && p == r && q == r {
                                    continue;
                                }
                                let y = i + (p - r) * d as isize;
                                let xx = j + (q - r) * d as isize;
                                if y < 0
                                    || xx < 0
                                    || y >= s.height as isize
                                    || xx >= s.width as isize
                                {
                                    continue;
                                }
                                acc += w.get(o, c, p as usize, q as usize)
                                    * x.get(b, c, y as usize, xx as usize);
                            }
                        }
                    }
                    out.set(b, o, i as usize, j as usize, acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_sum() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for case in 0..40 {
        let k = [1, 3, 5][case % 3];
        let donut = k > 1 && case % 2 == 0;
        let d = if k == 1 { 1 } else { 1 + case % 3 };
        let (cin, cout) = (1 + case % 3, 1 + (case / 3) % 3);
        let x = random_tensor(
            Shape::new(1 + case % 2, cin, 3 + case % 7, 2 + case % 9),
            &mut r,
        );
        let w = random_tensor(Shape::new(cout, cin, k, k), &mut r);
        let bias: Vec<f64> = (0..cout).map(|_| r.random_range(-1.0..1.0)).collect();
        let kernel = ConvKernel::new(w.clone(), bias.clone(), d, donut).unwrap();
        let got = conv2d_forward(&x, &kernel).unwrap();
        let want = naive_conv(&x, &w, &bias, d, donut);
        assert!(got.max_abs_diff(&want) < 1e-12, "case {case}");
    }
}

/// Input offsets that change the center output when perturbed, found by
/// pushing an impulse through the actual network.
fn empirical_field(spec: &NetworkSpec, size: usize) -> Vec<(i64, i64)> {
    let params = init_params(spec, 5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let base = Tensor::image(size, size, (0..size * size).map(|_| r.random()).collect()).unwrap();
    let c = size / 2;
    let y0 = forward(&params, &base).unwrap().get(0, 0, c, c);
    let mut out = Vec::new();
    for i in 0..size {
        for j in 0..size {
            let mut x = base.clone();
            x.set(0, 0, i, j, x.get(0, 0, i, j) + 0.5);
            if forward(&params, &x).unwrap().get(0, 0, c, c) != y0 {
                out.push((i as i64 - c as i64, j as i64 - c as i64));
            }
        }
    }
    out
}

#[test]
fn static_field_matches_impulse_response() {
    for (k, d, depth) in [(3, 2, 1), (3, 1, 1), (5, 2, 1), (3, 3, 2)] {
        let spec = NetworkSpec::two_path(&ArchConfig {
            donut_kernel: k,
            path_dilations: vec![d],
            path_depth: depth,
            channel_width: 3,
            invariant_by_construction: false,
        })
        .unwrap();
        let fields = receptive_fields(&spec).unwrap();
        let out = spec
            .nodes
            .iter()
            .position(|n| n.name == spec.output)
            .unwrap();
        let size = 2 * fields[out].radius() as usize + 5;
        let empirical = empirical_field(&spec, size);
        let stat: Vec<_> = fields[out].iter().copied().collect();
        assert_eq!(empirical, stat, "K={k} d={d} depth={depth}");
        let invariant = check_invariance_static(&spec).unwrap().invariant;
        assert_eq!(invariant, !empirical.contains(&(0, 0)));
    }
}

/// SSIM straight from the definition: every 11 x 11 window, 2D Gaussian weights.
fn naive_ssim(x: &Tensor, y: &Tensor) -> f64 {
    let s = x.shape();
    let g: Vec<f64> = (0..11)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp())
        .collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=s.height - 11 {
        for j in 0..=s.width - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for p in 0..11 {
                for q in 0..11 {
                    let w = g[p] * g[q] / norm;
                    let (a, b) = (x.get(0, 0, i + p, j + q), y.get(0, 0, i + p, j + q));
                    mx += w * a;
                    my += w * b;
                    sxx += w * a * a;
                    syy += w * b * b;
                    sxy += w * a * b;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_windowed_definition() {
    let y = synthetic_image(32, 32, 4);
    let inverted = y.map(|v| 1.0 - v);
    let got = ssim(&inverted, &y).unwrap();
    assert!((got - naive_ssim(&inverted, &y)).abs() < 1e-10);
    assert!(got < 1.0);
    let noisy = apply_salt_pepper(&y, 0.2, 3).unwrap();
    assert!((ssim(&noisy, &y).unwrap() - naive_ssim(&noisy, &y)).abs() < 1e-10);
}

#[test]
fn ssim_of_constants_by_hand() {
    // Zero variance everywhere, so SSIM = (2 a b + C1) / (a^2 + b^2 + C1) * (C2 / C2).
    let (a, b) = (0.25, 0.75);
    let x = Tensor::full(Shape::new(1, 1, 11, 11), a);
    let y = Tensor::full(Shape::new(1, 1, 11, 11), b);
    let c1 = 1e-4;
    let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
    assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-12);
}

#[test]
fn psnr_by_formula() {
    // One unit error among 100 pixels: MSE is exactly the double nearest 0.01.
    let zeros = Tensor::zeros(Shape::new(1, 1, 10, 10));
    let mut one = zeros.clone();
    one.set(0, 0, 3, 7, 1.0);
    assert_eq!(psnr(&one, &zeros, 1.0).unwrap(), 20.0);
    let y = Tensor::full(Shape::new(1, 1, 8, 8), 0.25);
    assert_eq!(psnr(&y.map(|v| v + 1.0), &y, 1.0).unwrap(), 0.0);
    assert_eq!(
        psnr(&y.map(|v| v + 0.5), &y, 2.0).unwrap(),
        10.0 * 16.0f64.log10()
    );
}

#[test]
fn salt_pepper_shift_matches_expectation() {
    // E[noisy] = (1 - d) y + d / 2, so the mean moves by d (0.5 - mean(y)).
    let y = Tensor::full(Shape::new(1, 1, 512, 512), 0.2);
    let d = 0.4;
    let shift = brightness_shift(&apply_salt_pepper(&y, d, 21).unwrap(), &y).unwrap();
    assert!((shift - d * (0.5 - 0.2)).abs() < 0.005, "{shift}");
}

#[test]
fn losses_by_hand() {
    let x = Tensor::full(Shape::new(1, 1, 3, 3), 0.25);
    let pred = x.map(|v| v + 0.5);
    assert_eq!(l2_self_loss(&pred, &x).unwrap().loss, 0.25);
    // |r| = 0.1, lambda = 10: w = 0.5, so the loss is 0.5 * 0.01.
    let pred = x.map(|v| v + 0.1);
    let adss = adss_loss(&pred, &x, 10.0).unwrap();
    let r = pred.data()[0] - x.data()[0];
    assert!((adss.loss - r * r / (1.0 + 10.0 * r)).abs() < 1e-15);
    // [[0, 1], [0, 1]]: horizontal terms 1 + 1, vertical 0 + 0, four terms.
    let img = Tensor::image(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    assert_eq!(tv_term(&img, 0.3).unwrap().loss, 0.3 * 2.0 / 4.0);
}

#[test]
fn radam_matches_hand_stepped_scalar() {
    // beta2 = 0.9 gives rho_inf = 19: early steps take the momentum-only
    // branch, later ones rectify, so both are covered.
    let config = OptimConfig {
        lr: 0.1,
        beta1: 0.5,
        beta2: 0.9,
        eps: 1e-8,
        decay_factor: 0.5,
        decay_interval: 2,
    };
    let grads = [0.3, -0.2, 0.5, 0.1, -0.4, 0.25, 0.05, 0.6];
    let mut state = OptimState::new(config, 1);
    let mut theta = [1.0];

    let (b1, b2) = (0.5f64, 0.9f64);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0; // 19
    let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        let lr = 0.1 * 0.5f64.powi((t - 1) / 2);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let rho = rho_inf - 2.0 * t as f64 * b2.powi(t) / (1.0 - b2.powi(t));
        if rho > 4.0 {
            let rect = ((rho - 4.0) * (rho - 2.0) * rho_inf
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                .sqrt();
            p -= lr * rect * m_hat / ((v / (1.0 - b2.powi(t))).sqrt() + 1e-8);
        } else {
            p -= lr * m_hat;
        }
        state.update(&mut theta, &[g]).unwrap();
        assert!(
            (theta[0] - p).abs() < 1e-12,
            "step {t}: {} vs {p}",
            theta[0]
        );
    }
    // The first steps take the momentum-only branch, later ones rectify.
    assert!(rho_inf - 2.0 * b2 / (1.0 - b2) <= 4.0);
    assert!(rho_inf - 16.0 * b2.powi(8) / (1.0 - b2.powi(8)) > 4.0);
}
