//! The `n2k` command line.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analyzer::check_invariance_static;
use crate::config::TrainConfig;
use crate::error::{N2kError, Result};
use crate::gradcheck::run_suite;
use crate::image_io::{list_images, read_image, write_image};
use crate::metrics::EvalReport;
use crate::net::{load_checkpoint, save_checkpoint, ArchConfig, NetworkSpec};
use crate::noise::{NoiseKind, NoiseSpec, SaltPepperMode};
use crate::train::{denoise, initial_params, train, training_patches, validation_pairs};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "n2k",
    version,
    about = "Blind-spot image denoising with dilated convolutions"
)]
pub struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML training/noise configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add synthetic noise to images and write a sidecar describing it.
    Corrupt(CorruptArgs),
    /// Train a network on a directory of images.
    Train(TrainArgs),
    /// Denoise images with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Compare predictions against clean references.
    Eval(EvalArgs),
    /// Prove or refute per-pixel input invariance of a network.
    Analyze(AnalyzeArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Awgn,
    Speckle,
    SaltPepper,
    Fusion,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Total,
    PerSide,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// Image file or directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Noise kind; without it the `[noise]` section of the config is used.
    #[arg(long)]
    pub kind: Option<KindArg>,
    /// Gaussian sigma on the 0..255 scale.
    #[arg(long)]
    pub sigma_g: Option<f64>,
    /// Speckle sigma on the 0..255 scale.
    #[arg(long)]
    pub sigma_s: Option<f64>,
    /// Salt-and-pepper density in [0, 1].
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long, value_enum, default_value = "total")]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training images (overrides data.train_dir).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Clean validation images (overrides data.validation_dir).
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Average over the eight rotations and mirrors.
    #[arg(long)]
    pub tta: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted image file or directory.
    #[arg(long)]
    pub pred: PathBuf,
    /// Clean image file or directory; directories are matched by file name.
    #[arg(long)]
    pub clean: PathBuf,
    /// Also write one CSV row per image.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// PSNR on 8-bit quantized values instead of floats.
    #[arg(long)]
    pub quantized: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Network spec TOML; otherwise the two-path network is built from the flags.
    #[arg(long, conflicts_with_all = ["kernel", "dilations", "depth"])]
    pub spec: Option<PathBuf>,
    /// Donut kernel size.
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Comma-separated dilation per path.
    #[arg(long, value_delimiter = ',')]
    pub dilations: Option<Vec<usize>>,
    /// Dilated layers per path.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random cases per check.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
}

/// Noise metadata written next to every corrupted image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSidecar {
    pub source: String,
    pub master_seed: u64,
    pub index: u64,
    pub tool_version: String,
    pub noise: NoiseSpec,
}

/// Written into every run directory next to the resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub tool_version: String,
    pub seed: u64,
    pub train_images: Vec<String>,
    pub validation_images: Vec<String>,
    pub patches: usize,
    pub parameters: usize,
}

enum Failure {
    Usage(String),
    Run(N2kError),
}

impl From<N2kError> for Failure {
    fn from(e: N2kError) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(Failure::Usage(format!("--threads: {e}"))),
        },
        None => execute(&cli),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Corrupt(args) => corrupt(cli, args),
        Command::Train(args) => run_train(cli, args),
        Command::Denoise(args) => run_denoise(args),
        Command::Eval(args) => eval(args),
        Command::Analyze(args) => analyze(args),
        Command::Gradcheck(args) => gradcheck(cli, args),
    }
}

fn load_config(cli: &Cli) -> Result<Option<TrainConfig>> {
    cli.config.as_deref().map(TrainConfig::load).transpose()
}

/// A single image file, or every image directly inside a directory.
fn inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let files = list_images(path)?;
        if files.is_empty() {
            return Err(N2kError::config(format!(
                "{}: no .pgm or .png images",
                path.display()
            )));
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| N2kError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| N2kError::io(path, e))
}

fn noise_from_flags(args: &CorruptArgs) -> CliResult<Option<NoiseKind>> {
    let Some(kind) = args.kind else {
        return Ok(None);
    };
    let need = |v: Option<f64>, flag: &str| {
        v.ok_or_else(|| Failure::Usage(format!("--kind {kind:?} requires --{flag}").to_lowercase()))
    };
    let mode = match args.mode {
        ModeArg::Total => SaltPepperMode::Total,
        ModeArg::PerSide => SaltPepperMode::PerSide,
    };
    Ok(Some(match kind {
        KindArg::Awgn => NoiseKind::Awgn {
            sigma_g: need(args.sigma_g, "sigma-g")?,
        },
        KindArg::Speckle => NoiseKind::Speckle {
            sigma_s: need(args.sigma_s, "sigma-s")?,
        },
        KindArg::SaltPepper => NoiseKind::SaltPepper {
            density: need(args.density, "density")?,
            mode,
        },
        KindArg::Fusion => NoiseKind::Fusion {
            sigma_g: need(args.sigma_g, "sigma-g")?,
            sigma_s: need(args.sigma_s, "sigma-s")?,
            density: need(args.density, "density")?,
            mode,
        },
    }))
}

fn corrupt(cli: &Cli, args: &CorruptArgs) -> CliResult<()> {
    let config = load_config(cli)?;
    let kind = match noise_from_flags(args)? {
        Some(kind) => kind,
        None => config.as_ref().and_then(|c| c.noise).ok_or_else(|| {
            Failure::Usage(
                "no noise given: pass --kind or a --config with a [noise] section".into(),
            )
        })?,
    };
    kind.validate()?;
    let seed = cli.seed.or(config.map(|c| c.seed)).unwrap_or(0);
    let master = NoiseSpec::new(kind, seed);
    let files = inputs(&args.input)?;
    create_dir(&args.output)?;
    for (i, path) in files.iter().enumerate() {
        let spec = master.for_index(i as u64);
        let noisy = spec.apply(&read_image(path)?)?;
        let name = file_name(path);
        write_image(&args.output.join(&name), &noisy)?;
        let sidecar = NoiseSidecar {
            source: name.clone(),
            master_seed: seed,
            index: i as u64,
            tool_version: VERSION.into(),
            noise: spec,
        };
        let text =
            toml::to_string(&sidecar).map_err(|e| N2kError::config(format!("sidecar: {e}")))?;
        write_file(
            &args.output.join(format!("{name}.noise.toml")),
            text.as_bytes(),
        )?;
    }
    println!(
        "corrupted {} image(s) into {}",
        files.len(),
        args.output.display()
    );
    Ok(())
}

fn run_train(cli: &Cli, args: &TrainArgs) -> CliResult<()> {
    let mut config = load_config(cli)?.unwrap_or_default();
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &args.train {
        config.data.train_dir = Some(dir.clone());
    }
    if let Some(dir) = &args.validation {
        config.data.validation_dir = Some(dir.clone());
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    config.validate()?;
    let config = config.resolved();
    let train_dir = config.data.train_dir.clone().ok_or_else(|| {
        Failure::Usage("no training images: pass --train or set data.train_dir".into())
    })?;
    if config.data.validation_dir.is_some() && config.noise.is_none() {
        return Err(
            N2kError::config("validation images need a [noise] section to be corrupted").into(),
        );
    }

    let train_files = inputs(&train_dir)?;
    let images = train_files
        .iter()
        .map(|p| read_image(p))
        .collect::<Result<Vec<_>>>()?;
    let val_files = match &config.data.validation_dir {
        Some(dir) => inputs(dir)?,
        None => Vec::new(),
    };
    let val_images = val_files
        .iter()
        .map(|p| read_image(p))
        .collect::<Result<Vec<_>>>()?;
    let patches = training_patches(&images, &config)?;
    let validation = validation_pairs(&val_images, &config)?;
    let mut params = initial_params(&config)?;

    create_dir(&args.out)?;
    write_file(&args.out.join("config.toml"), config.to_toml()?.as_bytes())?;
    let info = RunInfo {
        tool_version: VERSION.into(),
        seed: config.seed,
        train_images: train_files.iter().map(|p| file_name(p)).collect(),
        validation_images: val_files.iter().map(|p| file_name(p)).collect(),
        patches: patches.len(),
        parameters: params.num_parameters(),
    };
    let info_text =
        toml::to_string(&info).map_err(|e| N2kError::config(format!("run info: {e}")))?;
    write_file(&args.out.join("run.toml"), info_text.as_bytes())?;

    let log_path = args.out.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| N2kError::io(&log_path, e))?;
    train(&mut params, &patches, &validation, &config, |record| {
        let line = serde_json::to_string(record).map_err(|e| N2kError::Training(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| N2kError::io(&log_path, e))?;
        eprintln!("{line}");
        Ok(())
    })?;
    save_checkpoint(&params, &args.out.join("checkpoint.n2k"))?;
    println!(
        "trained {} epoch(s) on {} patch(es); run in {}",
        config.train.epochs,
        patches.len(),
        args.out.display()
    );
    Ok(())
}

fn run_denoise(args: &DenoiseArgs) -> CliResult<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let report = check_invariance_static(&params.spec)?;
    if !report.invariant {
        return Err(N2kError::Checkpoint(format!(
            "{}: network output depends on the input pixel itself; refusing to denoise",
            args.checkpoint.display()
        ))
        .into());
    }
    let files = inputs(&args.input)?;
    create_dir(&args.output)?;
    for path in &files {
        let out = denoise(&params, &read_image(path)?, args.tta)?;
        write_image(&args.output.join(file_name(path)), &out)?;
    }
    println!(
        "denoised {} image(s) into {}",
        files.len(),
        args.output.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let pairs: Vec<(String, PathBuf, PathBuf)> = if args.pred.is_dir() {
        let clean_dir = if args.clean.is_dir() {
            &args.clean
        } else {
            return Err(Failure::Usage(
                "--pred is a directory, so --clean must be one too".into(),
            ));
        };
        inputs(&args.pred)?
            .into_iter()
            .map(|p| {
                let name = file_name(&p);
                let c = clean_dir.join(&name);
                (name, p, c)
            })
            .collect()
    } else {
        vec![(file_name(&args.pred), args.pred.clone(), args.clean.clone())]
    };

    let mut csv = String::from("image,psnr,ssim,mean_shift\n");
    let mut reports = Vec::with_capacity(pairs.len());
    for (name, pred, clean) in &pairs {
        let report = EvalReport::compute(&read_image(pred)?, &read_image(clean)?, args.quantized)?;
        println!("[{name}]\n{report}\n");
        csv.push_str(&format!(
            "{name},{},{},{}\n",
            report.psnr, report.ssim, report.mean_shift
        ));
        reports.push(report);
    }
    if reports.len() > 1 {
        let n = reports.len() as f64;
        let mean = EvalReport {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            mean_shift: reports.iter().map(|r| r.mean_shift).sum::<f64>() / n,
        };
        println!("[mean]\n{mean}");
    }
    if let Some(path) = &args.csv {
        write_file(path, csv.as_bytes())?;
    }
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| N2kError::io(path, e))?;
            NetworkSpec::from_toml(&text)?
        }
        None => {
            let defaults = ArchConfig::default();
            let mut spec = NetworkSpec::two_path(&ArchConfig {
                donut_kernel: args.kernel.unwrap_or(defaults.donut_kernel),
                path_dilations: args.dilations.clone().unwrap_or(defaults.path_dilations),
                path_depth: args.depth.unwrap_or(defaults.path_depth),
                // Receptive fields do not depend on the width.
                channel_width: 1,
                invariant_by_construction: false,
            })?;
            // Claimed after construction so that a violating layout is still
            // built and reported rather than rejected up front.
            spec.meta.invariant_by_construction = true;
            spec
        }
    };
    let report = check_invariance_static(&spec)?;
    if args.json {
        let text =
            serde_json::to_string_pretty(&report).map_err(|e| N2kError::config(e.to_string()))?;
        println!("{text}");
    } else {
        print!("{report}");
    }
    if report.flag_violated() {
        return Err(N2kError::config(
            "network is flagged invariant by construction but the check fails",
        )
        .into());
    }
    Ok(())
}

fn gradcheck(cli: &Cli, args: &GradcheckArgs) -> CliResult<()> {
    if args.cases == 0 {
        return Err(Failure::Usage("--cases must be positive".into()));
    }
    let summaries = run_suite(cli.seed.unwrap_or(0), args.cases)?;
    let mut failed = 0;
    for s in &summaries {
        println!("{s}");
        failed += usize::from(!s.passed());
    }
    if failed > 0 {
        return Err(N2kError::Training(format!("{failed} gradient check(s) failed")).into());
    }
    Ok(())
}
