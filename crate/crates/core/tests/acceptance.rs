//! End-to-end acceptance checks. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line; the process fails if any criterion does.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use n2k_core::analyzer::{check_invariance_static, verify_prop2_sweep};
use n2k_core::config::TrainConfig;
use n2k_core::dihedral::{augment_dihedral, GROUP_ORDER};
use n2k_core::gradcheck::run_suite;
use n2k_core::image_io::write_image;
use n2k_core::loss::{adss_loss, adss_weight, l2_self_loss, total_variation, LossSpec, WeightGrad};
use n2k_core::metrics::{brightness_shift, psnr, ssim, tta_apply, tta_denoise};
use n2k_core::net::{
    build_default_n2k, forward, init_params, ArchConfig, ModelParams, NetworkSpec,
};
use n2k_core::noise::{
    apply_awgn, apply_fusion, apply_salt_pepper, apply_salt_pepper_mode, apply_speckle,
    derive_seed, NoiseKind, NoiseSpec, SaltPepperMode, STAGE_AWGN, STAGE_SALT_PEPPER,
    STAGE_SPECKLE,
};
use n2k_core::synth::synthetic_image;
use n2k_core::train::{
    denoise, initial_params, train, training_patches, validation_pairs, ValidationPair,
};
use n2k_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// TV weight for the ADSS+TV comparison; the 1e-4 default barely moves the
/// loss at this scale.
const TV_ALPHA: f64 = 0.01;

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Exit code and the artifacts of one run.
type Run = (i32, Vec<(String, Vec<u8>)>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

struct Runner {
    /// Criterion numbers given on the command line; empty runs all.
    only: Vec<u32>,
    results: Vec<bool>,
}

impl Runner {
    fn criterion(&mut self, id: u32, name: &str, check: impl FnOnce() -> Result<Outcome>) {
        if self.only.is_empty() || self.only.contains(&id) {
            self.results.push(run_criterion(id, name, check));
        }
    }
}

fn run_criterion(id: u32, name: &str, check: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let out = check().unwrap_or_else(|e| Outcome {
        pass: false,
        detail: format!("error: {e}"),
    });
    let verdict = if out.pass { "PASS" } else { "FAIL" };
    println!(
        "{verdict} {id:>2} {name}: {} [{:.1?}]",
        out.detail,
        start.elapsed()
    );
    out.pass
}

fn two_path(kernel: usize, dilations: Vec<usize>, depth: usize) -> Result<NetworkSpec> {
    Ok(NetworkSpec::two_path(&ArchConfig {
        donut_kernel: kernel,
        path_dilations: dilations,
        path_depth: depth,
        channel_width: 4,
        invariant_by_construction: false,
    })?)
}

fn static_invariance() -> Result<Outcome> {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;
    for depth in 1..=8 {
        let report = check_invariance_static(&build_default_n2k(32, depth)?)?;
        pass &= report.invariant && report.witness.is_none() && !report.flag_violated();
    }
    notes.push("default depths 1..8 invariant".to_string());
    for (k, d) in [(3, 1), (5, 2)] {
        let spec = two_path(k, vec![d], 2)?;
        let report = check_invariance_static(&spec)?;
        let chain = report.witness.clone().unwrap_or_default();
        // The chain must run from the donut layer to the output and land on (0, 0).
        let ok = !report.invariant
            && chain.first().is_some_and(|s| s.name == "donut")
            && chain
                .last()
                .is_some_and(|s| s.name == spec.output && s.offset == (0, 0));
        pass &= ok;
        notes.push(format!("K={k} d={d}: {} steps", chain.len()));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!("{}; {:.0?} (< 1 s)", notes.join(", "), elapsed),
    )
}

fn empirical_invariance() -> Result<Outcome> {
    let start = Instant::now();
    let spec = build_default_n2k(32, 4)?;
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..50 {
        let params = init_params(&spec, r.random())?;
        let x = Tensor::image(32, 32, (0..32 * 32).map(|_| r.random()).collect())?;
        let (i, j) = (r.random_range(0..32), r.random_range(0..32));
        let mut y = x.clone();
        y.set(0, 0, i, j, r.random_range(-10.0..10.0));
        let a = forward(&params, &x)?.get(0, 0, i, j);
        let b = forward(&params, &y)?.get(0, 0, i, j);
        if a.to_bits() != b.to_bits() {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{mismatches}/50 changed outputs; {elapsed:.1?} (< 10 s)"),
    )
}

/// Whether `(0, 0)` is reachable as donut tap + `n` dilated taps: per axis the
/// dilated part is any multiple of `d` in `[-n d, n d]`, so the donut tap must
/// be such a multiple on both axes and not itself the center.
fn origin_reachable(k: usize, d: usize, n: usize) -> bool {
    let r = (k / 2) as i64;
    let (d, n) = (d as i64, n as i64);
    let cancels = |a: i64| a % d == 0 && (a / d).abs() <= n;
    (-r..=r).any(|a| (-r..=r).any(|b| (a, b) != (0, 0) && cancels(a) && cancels(b)))
}

fn sufficiency_sweep() -> Result<Outcome> {
    let rows = verify_prop2_sweep([3, 5, 7, 9], 1..=5, 1..=8)?;
    let contradictions = rows.iter().filter(|r| r.contradicts_sufficiency()).count();
    let oracle_mismatches = rows
        .iter()
        .filter(|r| r.enumerated_invariant == origin_reachable(r.kernel, r.dilation, r.depth))
        .count();
    outcome(
        rows.len() == 160 && contradictions == 0 && oracle_mismatches == 0,
        format!(
            "{} cells, {contradictions} sufficiency contradictions, {oracle_mismatches} disagreements with direct enumeration",
            rows.len()
        ),
    )
}

fn gradient_suite() -> Result<Outcome> {
    let start = Instant::now();
    let summaries = run_suite(0, 100)?;
    let failed: Vec<&str> = summaries
        .iter()
        .filter(|s| !s.passed())
        .map(|s| s.name.as_str())
        .collect();
    // Checks that backpropagate through a whole network run at 1e-4, single ops at 1e-5.
    let tolerances_ok = summaries.iter().all(|s| {
        s.rtol
            == if s.name.contains("network") {
                1e-4
            } else {
                1e-5
            }
    });
    let worst = summaries.iter().map(|s| s.worst).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(
        failed.is_empty() && tolerances_ok && summaries.iter().all(|s| s.cases == 100) && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, failing {failed:?}, worst error/tolerance {worst:.3}; {elapsed:.1?} (< 120 s)",
            summaries.len()
        ),
    )
}

/// Relative gap of `E|f(x)-x|^2 = E|f(x)-y|^2 + E|x-y|^2` over `draws` noise draws.
fn identity_gap(params: &ModelParams, clean: &Tensor, noise: NoiseKind, draws: u64) -> Result<f64> {
    let spec = NoiseSpec::new(noise, 17);
    let (mut to_noisy, mut to_clean, mut noise_power) = (0.0, 0.0, 0.0);
    for m in 0..draws {
        let x = spec.for_index(m).apply(clean)?;
        let f = forward(params, &x)?;
        let sq = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
        };
        to_noisy += sq(&f, &x);
        to_clean += sq(&f, clean);
        noise_power += sq(&x, clean);
    }
    Ok((to_noisy - (to_clean + noise_power)).abs() / to_noisy)
}

fn unbiased_identity() -> Result<Outcome> {
    // Frozen random two-path network, kept narrow so 2 x 10^4 forward passes stay cheap.
    let params = init_params(&build_default_n2k(4, 2)?, 11)?;
    let clean = synthetic_image(64, 64, 5);
    let awgn = identity_gap(&params, &clean, NoiseKind::Awgn { sigma_g: 25.0 }, 10_000)?;
    let mean = clean.data().iter().sum::<f64>() / clean.len() as f64;
    let dark = clean.map(|v| v * 0.2 / mean);
    let sp = NoiseKind::SaltPepper {
        density: 0.5,
        mode: SaltPepperMode::Total,
    };
    let salt_pepper = identity_gap(&params, &dark, sp, 10_000)?;
    outcome(
        awgn < 0.02 && salt_pepper > 0.05,
        format!("AWGN 25 gap {awgn:.5} (< 0.02); salt-and-pepper 0.5 on dark image gap {salt_pepper:.4} (> 0.05)"),
    )
}

struct Moments {
    mean: f64,
    std: f64,
    kurtosis: f64,
}

fn moments(v: &[f64]) -> Moments {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    Moments {
        mean,
        std: m2.sqrt(),
        kurtosis: m4 / (m2 * m2),
    }
}

fn noise_statistics() -> Result<Outcome> {
    let clean = Tensor::full(Shape::new(1, 1, 1000, 1000), 0.5);
    let mut notes = Vec::new();
    let mut pass = true;
    // Standardized noise should have mean 0, std 1 and the law's kurtosis.
    let mut moment_check = |name: &str, noisy: &Tensor, scale: f64, kurtosis: f64| {
        let n: Vec<f64> = noisy.data().iter().map(|x| (x - 0.5) / scale).collect();
        let m = moments(&n);
        pass &= m.mean.abs() < 0.01
            && (m.std - 1.0).abs() < 0.01
            && (m.kurtosis / kurtosis - 1.0).abs() < 0.01;
        notes.push(format!(
            "{name} mean {:+.4} std {:.4} kurt {:.3}",
            m.mean, m.std, m.kurtosis
        ));
    };
    moment_check("awgn", &apply_awgn(&clean, 25.0, 1)?, 25.0 / 255.0, 3.0);
    // Speckle multiplies by 1 + n, n uniform.
    moment_check(
        "speckle",
        &apply_speckle(&clean, 25.0, 2)?,
        0.5 * 25.0 / 255.0,
        1.8,
    );

    for (mode, d, expected) in [
        (SaltPepperMode::Total, 0.3, 0.3),
        (SaltPepperMode::PerSide, 0.2, 0.4),
    ] {
        let noisy = apply_salt_pepper_mode(&clean, d, mode, 3)?;
        let hit = noisy.data().iter().filter(|&&v| v != 0.5).count() as f64 / 1e6;
        pass &= (hit / expected - 1.0).abs() < 0.005;
        notes.push(format!("{mode:?} d={d} fraction {hit:.4}"));
    }

    let y = synthetic_image(64, 64, 8);
    let fused = apply_fusion(&y, 25.0, 25.0, 0.25, 9)?;
    let manual = apply_salt_pepper(
        &apply_speckle(
            &apply_awgn(&y, 25.0, derive_seed(9, STAGE_AWGN))?,
            25.0,
            derive_seed(9, STAGE_SPECKLE),
        )?,
        0.25,
        derive_seed(9, STAGE_SALT_PEPPER),
    )?;
    let same = fused.bit_eq(&manual);
    pass &= same;
    notes.push(format!("fusion bit-equal {same}"));
    outcome(pass, notes.join("; "))
}

fn adss_behaviour() -> Result<Outcome> {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::image(16, 16, (0..256).map(|_| r.random()).collect())?;
    let pred = Tensor::image(
        16,
        16,
        (0..256).map(|_| r.random_range(-0.5..1.5)).collect(),
    )?;
    let adss = adss_loss(&pred, &x, 0.0)?;
    let l2 = l2_self_loss(&pred, &x)?;
    let identical = adss.loss.to_bits() == l2.loss.to_bits() && adss.grad.bit_eq(&l2.grad);
    let half = adss_weight(0.1, 10.0);
    let residuals: Vec<f64> = (0..=2000).map(|i| i as f64 * 0.005).collect();
    let decreasing = residuals
        .windows(2)
        .all(|p| adss_weight(p[1], 10.0) < adss_weight(p[0], 10.0))
        && residuals
            .windows(2)
            .all(|p| adss_weight(-p[1], 10.0) < adss_weight(-p[0], 10.0));
    outcome(
        identical && half == 0.5 && decreasing,
        format!("lambda=0 bit-identical to L2: {identical}; w(0.1) = {half}; strictly decreasing in |r|: {decreasing}"),
    )
}

fn desk_images() -> Vec<Tensor> {
    (0..20).map(|i| synthetic_image(64, 64, 100 + i)).collect()
}

/// Trains with the default settings except for noise and loss; returns the
/// TTA prediction on the held-out pair.
fn desk_run(noise: &str, loss: LossSpec, held_out: &Tensor) -> Result<(ValidationPair, Tensor)> {
    let mut config = TrainConfig::from_toml(noise)?;
    config.loss = loss;
    let patches = training_patches(&desk_images(), &config)?;
    let pair = validation_pairs(std::slice::from_ref(held_out), &config)?.remove(0);
    let mut params = initial_params(&config)?;
    train(&mut params, &patches, &[], &config, |_| Ok(()))?;
    let pred = denoise(&params, &pair.noisy, true)?;
    Ok((pair, pred))
}

fn desk_scale_salt_pepper() -> Result<Outcome> {
    let noise = "[noise]\nkind = \"salt-pepper\"\ndensity = 0.3\n";
    // Darker than the training images, where a brightness shift shows.
    let held_out = synthetic_image(64, 64, 999).map(|v| 0.5 * v);
    let (pair, adss) = desk_run(noise, LossSpec::default(), &held_out)?;
    let (_, l2) = desk_run(noise, LossSpec::L2Self, &held_out)?;
    let noisy_psnr = psnr(&pair.noisy, &pair.clean, 1.0)?;
    let adss_psnr = psnr(&adss, &pair.clean, 1.0)?;
    let adss_shift = brightness_shift(&adss, &pair.clean)?;
    let l2_shift = brightness_shift(&l2, &pair.clean)?;
    outcome(
        adss_psnr >= noisy_psnr + 5.0 && adss_shift.abs() <= 0.5 * l2_shift.abs(),
        format!(
            "noisy {noisy_psnr:.2} dB, ADSS {adss_psnr:.2} dB (need >= {:.2}); shift ADSS {adss_shift:+.4} vs L2 {l2_shift:+.4}",
            noisy_psnr + 5.0
        ),
    )
}

fn desk_scale_tv() -> Result<Outcome> {
    let noise = "[noise]\nkind = \"fusion\"\nsigma_g = 25.0\nsigma_s = 25.0\ndensity = 0.25\n";
    let held_out = synthetic_image(64, 64, 999);
    let (pair, adss) = desk_run(noise, LossSpec::default(), &held_out)?;
    let tv_loss = LossSpec::AdssTv {
        lambda: 10.0,
        alpha: TV_ALPHA,
        weight_grad: WeightGrad::Detached,
    };
    let (_, with_tv) = desk_run(noise, tv_loss, &held_out)?;
    let (s_adss, s_tv) = (ssim(&adss, &pair.clean)?, ssim(&with_tv, &pair.clean)?);
    let (tv_adss, tv_tv) = (total_variation(&adss), total_variation(&with_tv));
    outcome(
        s_tv >= s_adss - 0.01 && tv_tv < tv_adss,
        format!("alpha {TV_ALPHA}: SSIM ADSS {s_adss:.4} vs ADSS+TV {s_tv:.4}; TV {tv_adss:.5} vs {tv_tv:.5}"),
    )
}

fn metrics_oracles() -> Result<Outcome> {
    // One unit error among 100 pixels gives MSE 0.01.
    let zeros = Tensor::zeros(Shape::new(1, 1, 10, 10));
    let mut one = zeros.clone();
    one.set(0, 0, 4, 4, 1.0);
    let p = psnr(&one, &zeros, 1.0)?;
    let y = synthetic_image(40, 40, 6);
    let s = ssim(&y, &y)?;
    let identity = tta_apply(&y, |t| Ok(t.clone()))?.bit_eq(&y);
    let params = init_params(&build_default_n2k(8, 2)?, 3)?;
    let x = synthetic_image(24, 24, 7);
    let base = tta_denoise(&params, &x)?;
    let mut equivariance = 0.0f64;
    for k in 0..GROUP_ORDER {
        let moved = tta_denoise(&params, &augment_dihedral(&x, k)?)?;
        equivariance = equivariance.max(moved.max_abs_diff(&augment_dihedral(&base, k)?));
    }
    outcome(
        p == 20.0 && s == 1.0 && identity && equivariance <= 1e-12,
        format!("PSNR {p}; SSIM(x, x) {s}; identity TTA exact {identity}; equivariance error {equivariance:.1e}"),
    )
}

fn n2k(args: &[&str]) -> Result<(i32, Vec<u8>)> {
    let out = Command::new(env!("CARGO_BIN_EXE_n2k"))
        .args(args)
        .output()?;
    Ok((out.status.code().unwrap_or(-1), out.stdout))
}

/// Every file in `dir` with its bytes, sorted by name.
fn snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        files.push((
            path.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            fs::read(&path)?,
        ));
    }
    files.sort();
    Ok(files)
}

fn cli_reproducibility() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let clean = root.join("clean");
    fs::create_dir(&clean)?;
    for i in 0..3 {
        write_image(
            &clean.join(format!("img{i}.png")),
            &synthetic_image(24, 24, 40 + i),
        )?;
    }
    let config = root.join("run.toml");
    fs::write(
        &config,
        "seed = 5\n[data]\npatch_size = 16\nstride = 8\n[train]\nepochs = 2\nbatch_size = 4\n\
         [noise]\nkind = \"fusion\"\nsigma_g = 25.0\nsigma_s = 25.0\ndensity = 0.25\n\
         [network]\nchannel_width = 4\npath_depth = 2\n",
    )?;
    let mut differing = Vec::new();
    let mut failed = Vec::new();
    let mut compare = |name: &str, runs: Vec<Run>| {
        if runs.iter().any(|(code, _)| *code != 0) {
            failed.push(name.to_string());
        }
        if runs.windows(2).any(|w| w[0].1 != w[1].1) {
            differing.push(name.to_string());
        }
    };
    let threads = ["1", "2", "3"];
    let config_arg = s(&config);

    let mut runs = Vec::new();
    for t in threads {
        let out = root.join(format!("noisy{t}"));
        let (code, _) = n2k(&[
            "--config",
            &config_arg,
            "--threads",
            t,
            "corrupt",
            "--input",
            &s(&clean),
            "--output",
            &s(&out),
        ])?;
        runs.push((code, snapshot(&out)?));
    }
    compare("corrupt", runs);

    let mut runs = Vec::new();
    for t in threads {
        let out = root.join(format!("run{t}"));
        let args = [
            "--config",
            &config_arg,
            "--threads",
            t,
            "train",
            "--train",
            &s(&clean),
            "--validation",
            &s(&clean),
            "--out",
            &s(&out),
        ];
        let (code, _) = n2k(&args)?;
        runs.push((code, snapshot(&out)?));
    }
    compare("train", runs);

    let checkpoint = s(&root.join("run1").join("checkpoint.n2k"));
    let mut runs = Vec::new();
    for t in threads {
        let out = root.join(format!("denoised{t}"));
        let args = [
            "--threads",
            t,
            "denoise",
            "--tta",
            "--checkpoint",
            &checkpoint,
            "--input",
            &s(&root.join("noisy1")),
            "--output",
            &s(&out),
        ];
        let (code, _) = n2k(&args)?;
        runs.push((code, snapshot(&out)?));
    }
    compare("denoise", runs);

    let mut runs = Vec::new();
    for t in threads {
        let csv = root.join(format!("eval{t}.csv"));
        let args = [
            "--threads",
            t,
            "eval",
            "--pred",
            &s(&root.join("denoised1")),
            "--clean",
            &s(&clean),
            "--csv",
            &s(&csv),
        ];
        let (code, stdout) = n2k(&args)?;
        runs.push((
            code,
            vec![("stdout".into(), stdout), ("csv".into(), fs::read(&csv)?)],
        ));
    }
    compare("eval", runs);

    for (name, args) in [
        ("analyze", vec!["analyze", "--json"]),
        ("gradcheck", vec!["gradcheck", "--cases", "2"]),
    ] {
        let mut runs = Vec::new();
        for t in threads {
            let mut full = vec!["--seed", "9", "--threads", t];
            full.extend(&args);
            let (code, stdout) = n2k(&full)?;
            runs.push((code, vec![("stdout".into(), stdout)]));
        }
        compare(name, runs);
    }
    outcome(
        differing.is_empty() && failed.is_empty(),
        format!(
            "corrupt, train, denoise, eval, analyze, gradcheck at 1/2/3 threads; differing {differing:?}, failed {failed:?}"
        ),
    )
}

fn main() {
    let mut runner = Runner {
        only: std::env::args()
            .skip(1)
            .filter_map(|a| a.parse().ok())
            .collect(),
        results: Vec::new(),
    };
    runner.criterion(1, "static invariance", static_invariance);
    runner.criterion(2, "bit-exact empirical invariance", empirical_invariance);
    runner.criterion(3, "dilation sufficiency sweep", sufficiency_sweep);
    runner.criterion(4, "gradient suite", gradient_suite);
    runner.criterion(5, "unbiased-estimator identity", unbiased_identity);
    runner.criterion(6, "noise statistics", noise_statistics);
    runner.criterion(7, "ADSS behaviour", adss_behaviour);
    runner.criterion(8, "desk-scale salt-and-pepper", desk_scale_salt_pepper);
    runner.criterion(9, "desk-scale ADSS+TV", desk_scale_tv);
    runner.criterion(10, "metrics oracles", metrics_oracles);
    runner.criterion(11, "CLI reproducibility", cli_reproducibility);
    let failed = runner.results.iter().filter(|p| !**p).count();
    println!(
        "\nacceptance: {} passed, {failed} failed",
        runner.results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
