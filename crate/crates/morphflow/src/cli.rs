//! The `morphflow` command-line front end.
//!
//! One executable covers the whole pipeline: `synth` builds datasets,
//! `train` fits a network, `register` applies a checkpoint to one pair,
//! `optimize-pair` runs the per-pair variational baseline, `evaluate`
//! scores Dice reports, `sweep` scans regularization weights, and `bench`
//! times network against baseline. Every run echoes its resolved
//! configuration (after config-file/flag merging) so results are
//! reproducible from the log alone.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::Error;
use crate::eval::{
    benchmark_runtime, evaluate_registration, write_bench_csv, write_dice_csv,
    write_summary_csv, FieldSource, DEFAULT_MIN_VOXELS,
};
use crate::loss::LossConfig;
use crate::net::{load_params, predict_field, ArchConfig};
use crate::synth::{write_dataset, PhantomSpec};
use crate::train::{
    select_model, sweep_lambda, train, write_sweep_csv, TrainConfig,
};
use crate::varopt::{optimize_pair, VarOptConfig};
use crate::volume::{load_volume, save_volume, VolumeFormat};
use crate::warp::sample_linear;
use crate::Real;

#[derive(Parser)]
#[command(
    name = "morphflow",
    version,
    about = "Learnable deformable registration: synthesize, train, register, evaluate"
)]
struct Cli {
    /// Cap on worker threads (1 guarantees bit-deterministic output).
    /// Computation currently runs single-threaded, so higher values only
    /// raise the permitted ceiling.
    #[arg(long, global = true, env = "MORPHFLOW_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of phantom pairs with known warps.
    Synth(SynthArgs),
    /// Train the registration network on a dataset manifest.
    Train(TrainArgs),
    /// Apply a trained checkpoint to one (fixed, moving) pair.
    Register(RegisterArgs),
    /// Optimize a displacement field for one pair (no learning).
    OptimizePair(OptimizePairArgs),
    /// Score registration quality (Dice, smoothness) over a manifest.
    Evaluate(EvaluateArgs),
    /// Train one network per regularization weight and tabulate results.
    Sweep(SweepArgs),
    /// Time network registration against the per-pair baseline.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Volume shape as comma-separated extents, e.g. 64,64 or 32,32,32.
    #[arg(long)]
    shape: String,
    /// Number of pairs to generate.
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    /// Number of labeled structures per phantom.
    #[arg(long, default_value_t = 4)]
    structures: usize,
    /// Peak ground-truth displacement magnitude in voxels.
    #[arg(long, default_value_t = 3.0)]
    amplitude: f64,
    /// Gaussian blur radius of the ground-truth fields, in voxels.
    #[arg(long, default_value_t = 4.0)]
    smoothness: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for volumes and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Optional split sizes (e.g. 40,10,10) writing manifest_train.json,
    /// manifest_val.json, manifest_test.json alongside the full manifest.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file mirroring the training configuration; explicit
    /// flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Output directory for checkpoints and log.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Regularization weight of the smoothness term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Local-correlation window edge length (odd).
    #[arg(long)]
    cc_window: Option<usize>,
    /// Architecture preset (1 = smaller, 2 = larger decoder); the spatial
    /// rank is inferred from the dataset.
    #[arg(long)]
    model: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
}

#[derive(Copy, Clone, ValueEnum)]
enum InputFormat {
    /// Raw little-endian payload with a JSON sidecar.
    Native,
    /// NIfTI-1 single-file (.nii) volumes.
    Nifti,
}

impl From<InputFormat> for VolumeFormat {
    fn from(f: InputFormat) -> Self {
        match f {
            InputFormat::Native => VolumeFormat::Native,
            InputFormat::Nifti => VolumeFormat::Nifti1,
        }
    }
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Where to write the displacement field (native format).
    #[arg(long)]
    out_field: PathBuf,
    /// Where to write the warped moving volume (native format).
    #[arg(long)]
    out_warped: PathBuf,
    /// Input volume format for --fixed/--moving.
    #[arg(long, value_enum, default_value_t = InputFormat::Native)]
    format: InputFormat,
}

#[derive(Args)]
struct OptimizePairArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    out_field: PathBuf,
    /// Where to write the per-iteration energy log CSV.
    #[arg(long)]
    energy_csv: Option<PathBuf>,
    /// Gradient-descent iterations per pyramid level.
    #[arg(long, default_value_t = 60)]
    iterations: usize,
    /// Line-search step ceiling.
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    /// Pyramid resolutions including full scale.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 9)]
    cc_window: usize,
    #[arg(long, value_enum, default_value_t = InputFormat::Native)]
    format: InputFormat,
}

#[derive(Copy, Clone, ValueEnum)]
enum SourceArg {
    /// Zero fields: the unregistered baseline.
    Identity,
    /// Forward passes of a trained checkpoint (needs --checkpoint).
    Network,
    /// Aligning oracle derived from each pair's stored generator field.
    GroundTruth,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SourceArg::Identity)]
    source: SourceArg,
    #[arg(long, required_if_eq("source", "network"))]
    checkpoint: Option<PathBuf>,
    /// Directory receiving dice.csv and summary.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Structures smaller than this in any segmentation are skipped.
    #[arg(long, default_value_t = DEFAULT_MIN_VOXELS)]
    min_voxels: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Output directory; per-weight runs land in lambda_<λ>/ subdirectories
    /// and the table in sweep.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated regularization weights, e.g. 0,0.5,1,2,4.
    #[arg(long)]
    lambdas: String,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    model: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Timed passes per method (after one untimed warmup).
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Where to write bench.csv.
    #[arg(long)]
    out: PathBuf,
    /// Baseline iteration cap per pyramid level. The default is effectively
    /// unbounded so the baseline stops when it matches the network's energy
    /// or its line search converges, never because the cap binds.
    #[arg(long, default_value_t = 100_000)]
    iterations: usize,
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 9)]
    cc_window: usize,
}

/// Entry point: parse, dispatch, translate outcomes to exit codes.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return 1;
    }
    println!("threads: {}", cli.threads);
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Register(a) => run_register(a),
        Command::OptimizePair(a) => run_optimize_pair(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(()) => 0,
        Err(CliFailure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliFailure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Distinguishes bad invocations (exit 1) from failures while working
/// (exit 2).
enum CliFailure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliFailure {
    fn from(e: Error) -> Self {
        CliFailure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), CliFailure>;

fn parse_usize_list(text: &str, what: &str) -> std::result::Result<Vec<usize>, CliFailure> {
    let items: std::result::Result<Vec<usize>, _> =
        text.split(',').map(|s| s.trim().parse::<usize>()).collect();
    match items {
        Ok(v) if !v.is_empty() && v.iter().all(|&x| x > 0) => Ok(v),
        _ => Err(CliFailure::Usage(format!(
            "{what} must be comma-separated positive integers, got '{text}'"
        ))),
    }
}

fn parse_real_list(text: &str, what: &str) -> std::result::Result<Vec<Real>, CliFailure> {
    let items: std::result::Result<Vec<f64>, _> =
        text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v.into_iter().map(|x| x as Real).collect()),
        _ => Err(CliFailure::Usage(format!(
            "{what} must be comma-separated numbers, got '{text}'"
        ))),
    }
}

fn echo_config<T: Serialize>(cfg: &T) {
    match serde_json::to_string(cfg) {
        Ok(json) => println!("resolved config: {json}"),
        Err(e) => println!("resolved config: <unserializable: {e}>"),
    }
}

fn run_synth(a: SynthArgs) -> CliResult {
    let shape = parse_usize_list(&a.shape, "--shape")?;
    let spec = PhantomSpec {
        shape,
        n_structures: a.structures,
        deform_amplitude: a.amplitude as Real,
        deform_smoothness: a.smoothness as Real,
        seed: a.seed,
    };
    let split = a
        .split
        .as_deref()
        .map(|s| parse_usize_list(s, "--split"))
        .transpose()?;
    echo_config(&spec);
    println!("seed: {}", spec.seed);
    let manifest = write_dataset(&spec, a.pairs, &a.out)?;
    println!(
        "wrote {} pairs to {} (manifest.json)",
        manifest.entries.len(),
        a.out.display()
    );
    if let Some(counts) = split {
        let parts = manifest.split(&counts)?;
        for (part, name) in parts.iter().zip(["train", "val", "test", "extra"]) {
            let path = a.out.join(format!("manifest_{name}.json"));
            part.save(&path)?;
            println!("split {}: {} pairs -> {}", name, part.entries.len(), path.display());
        }
    }
    Ok(())
}

/// Merge a config file (or defaults) with explicit flags; flags win.
#[allow(clippy::too_many_arguments)]
fn resolve_train_config(
    config: Option<&Path>,
    dataset: Option<PathBuf>,
    validation: Option<PathBuf>,
    out: Option<PathBuf>,
    iterations: Option<usize>,
    learning_rate: Option<f64>,
    lambda: Option<f64>,
    cc_window: Option<usize>,
    model: Option<u8>,
    seed: Option<u64>,
    checkpoint_interval: Option<usize>,
) -> std::result::Result<TrainConfig, CliFailure> {
    let mut cfg = match config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    if let Some(v) = validation {
        cfg.validation = Some(v);
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(it) = iterations {
        cfg.iterations = it;
    }
    if let Some(lr) = learning_rate {
        cfg.learning_rate = lr as Real;
    }
    if let Some(l) = lambda {
        cfg.loss.lambda = l as Real;
    }
    if let Some(w) = cc_window {
        cfg.loss.cc_window = w;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(ci) = checkpoint_interval {
        cfg.checkpoint_interval = ci;
    }
    if cfg.dataset.as_os_str().is_empty() {
        return Err(CliFailure::Usage(
            "no dataset manifest: pass --dataset or set it in --config".to_string(),
        ));
    }
    // The architecture preset adapts to the data's rank. An explicit config
    // file fixes the architecture unless --model asks for a preset.
    let data_rank = Dataset::open(&cfg.dataset)
        .and_then(|ds| ds.load_pair(0))
        .map(|p| p.fixed.rank())?;
    match model {
        Some(1) => cfg.arch = ArchConfig::model_1(data_rank),
        Some(2) => cfg.arch = ArchConfig::model_2(data_rank),
        Some(m) => {
            return Err(CliFailure::Usage(format!(
                "--model must be 1 or 2, got {m}"
            )))
        }
        None => {
            if config.is_none() {
                cfg.arch = ArchConfig::model_1(data_rank);
            }
        }
    }
    Ok(cfg)
}

fn run_train(a: TrainArgs) -> CliResult {
    let cfg = resolve_train_config(
        a.config.as_deref(),
        a.dataset,
        a.validation,
        a.out,
        a.iterations,
        a.learning_rate,
        a.lambda,
        a.cc_window,
        a.model,
        a.seed,
        a.checkpoint_interval,
    )?;
    echo_config(&cfg);
    println!("seed: {}", cfg.seed);
    let outcome = train(&cfg)?;
    let last = outcome.log.last().expect("at least one iteration");
    println!(
        "finished {} iterations; final loss {:.6} (similarity {:.6}, smoothness {:.6})",
        last.iter, last.loss, last.cc_term, last.smooth_term
    );
    println!(
        "final checkpoint: {}",
        outcome.checkpoints.last().expect("final checkpoint").display()
    );
    if let Some(val) = &cfg.validation {
        let (best, score) = select_model(&outcome.checkpoints, val)?;
        println!(
            "best checkpoint by validation Dice: {} ({score:.4})",
            best.display()
        );
    }
    Ok(())
}

fn run_register(a: RegisterArgs) -> CliResult {
    let params = load_params(&a.checkpoint)?;
    let fixed = load_volume(&a.fixed, a.format.into())?;
    let moving = load_volume(&a.moving, a.format.into())?;
    #[derive(Serialize)]
    struct Echo<'a> {
        checkpoint: &'a Path,
        fixed: &'a Path,
        moving: &'a Path,
        shape: &'a [usize],
    }
    echo_config(&Echo {
        checkpoint: &a.checkpoint,
        fixed: &a.fixed,
        moving: &a.moving,
        shape: &fixed.shape,
    });
    let t0 = Instant::now();
    let field = predict_field(&params, &fixed, &moving)?;
    let forward_ms = t0.elapsed().as_secs_f64() * 1e3;
    println!("forward pass: {forward_ms:.2} ms");
    let warped = sample_linear(&moving, &field)?;
    field.save(&a.out_field)?;
    save_volume(&warped, &a.out_warped)?;
    println!(
        "wrote field to {} and warped volume to {}",
        a.out_field.display(),
        a.out_warped.display()
    );
    Ok(())
}

fn run_optimize_pair(a: OptimizePairArgs) -> CliResult {
    let fixed = load_volume(&a.fixed, a.format.into())?;
    let moving = load_volume(&a.moving, a.format.into())?;
    let cfg = VarOptConfig {
        iterations_per_level: a.iterations,
        step_size: a.step as Real,
        levels: a.levels,
        loss: LossConfig {
            lambda: a.lambda as Real,
            cc_window: a.cc_window,
            ..LossConfig::default()
        },
    };
    echo_config(&cfg);
    let t0 = Instant::now();
    let (field, log) = optimize_pair(&fixed, &moving, &cfg)?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    let final_energy = log.last().map(|r| r.energy).unwrap_or(Real::NAN);
    println!(
        "optimized in {:.2} ms over {} accepted steps; final energy {final_energy:.6}",
        ms,
        log.len()
    );
    field.save(&a.out_field)?;
    println!("wrote field to {}", a.out_field.display());
    if let Some(csv) = &a.energy_csv {
        let mut text = String::from("level,iteration,energy\n");
        for r in &log {
            text.push_str(&format!("{},{},{:.6}\n", r.level, r.iteration, r.energy));
        }
        std::fs::write(csv, text).map_err(|e| Error::io(csv, e))?;
        println!("wrote energy log to {}", csv.display());
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> CliResult {
    let params = match a.source {
        SourceArg::Network => Some(load_params(a.checkpoint.as_ref().expect(
            "clap enforces --checkpoint with --source network",
        ))?),
        _ => None,
    };
    let source = match a.source {
        SourceArg::Identity => FieldSource::Identity,
        SourceArg::GroundTruth => FieldSource::GroundTruth,
        SourceArg::Network => FieldSource::Network(params.as_ref().expect("loaded above")),
    };
    #[derive(Serialize)]
    struct Echo<'a> {
        manifest: &'a Path,
        source: &'a str,
        min_voxels: usize,
    }
    echo_config(&Echo {
        manifest: &a.manifest,
        source: match a.source {
            SourceArg::Identity => "identity",
            SourceArg::Network => "network",
            SourceArg::GroundTruth => "ground-truth",
        },
        min_voxels: a.min_voxels,
    });
    let report = evaluate_registration(&source, &a.manifest, a.min_voxels)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    write_dice_csv(&report.rows, &a.out_dir.join("dice.csv"))?;
    write_summary_csv(
        &[
            ("dice", report.mean_dice, report.sd_dice),
            ("smooth_energy", report.mean_smooth, report.sd_smooth),
        ],
        &a.out_dir.join("summary.csv"),
    )?;
    println!(
        "mean Dice {:.4} (sd {:.4}) over {} measurements; mean smoothness energy {:.4}",
        report.mean_dice,
        report.sd_dice,
        report.rows.len(),
        report.mean_smooth
    );
    println!("wrote dice.csv and summary.csv to {}", a.out_dir.display());
    Ok(())
}

fn run_sweep(a: SweepArgs) -> CliResult {
    let grid = parse_real_list(&a.lambdas, "--lambdas")?;
    let cfg = resolve_train_config(
        a.config.as_deref(),
        a.dataset,
        a.validation,
        a.out,
        a.iterations,
        a.learning_rate,
        None,
        None,
        a.model,
        a.seed,
        None,
    )?;
    if cfg.validation.is_none() {
        return Err(CliFailure::Usage(
            "sweep needs --validation (or a config file providing it)".to_string(),
        ));
    }
    echo_config(&cfg);
    println!("seed: {}", cfg.seed);
    println!("lambda grid: {grid:?}");
    let rows = sweep_lambda(&cfg, &grid)?;
    let csv = cfg.out_dir.join("sweep.csv");
    write_sweep_csv(&rows, &csv)?;
    for r in &rows {
        println!(
            "lambda {:>5}: mean Dice {:.4}, mean smoothness energy {:.4}",
            r.lambda, r.mean_dice, r.mean_smooth_energy
        );
    }
    println!("wrote {}", csv.display());
    Ok(())
}

fn run_bench(a: BenchArgs) -> CliResult {
    let params = load_params(&a.checkpoint)?;
    let cfg = VarOptConfig {
        iterations_per_level: a.iterations,
        step_size: a.step as Real,
        levels: a.levels,
        loss: LossConfig {
            lambda: a.lambda as Real,
            cc_window: a.cc_window,
            ..LossConfig::default()
        },
    };
    #[derive(Serialize)]
    struct Echo<'a> {
        manifest: &'a Path,
        checkpoint: &'a Path,
        repetitions: usize,
        baseline: &'a VarOptConfig,
    }
    echo_config(&Echo {
        manifest: &a.manifest,
        checkpoint: &a.checkpoint,
        repetitions: a.repetitions,
        baseline: &cfg,
    });
    let rows = benchmark_runtime(&params, &a.manifest, a.repetitions, &cfg)?;
    write_bench_csv(&rows, &a.out)?;
    for r in &rows {
        println!(
            "{:>8}: median {:.2} ms (sd {:.2} ms)",
            r.method, r.median_ms, r.sd_ms
        );
    }
    if let [net, base] = rows.as_slice() {
        if net.median_ms > 0.0 {
            println!("speedup: {:.1}x", base.median_ms / net.median_ms);
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
