//! Stochastic training of the registration network, plus model selection
//! over checkpoints and regularization-weight sweeps.
//!
//! Each training step samples one pair from the dataset (the fixed volume is
//! the shared atlas), runs the network forward to a displacement field,
//! evaluates the similarity + smoothness loss through the differentiable
//! warp, backpropagates to the parameters, and applies one bias-corrected
//! Adam update. One pair per step, a fixed iteration budget, and a pinned
//! RNG make every run reproducible from its config and seed alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{diffusion_reg, total_loss, LossConfig};
use crate::net::{
    backward, build_network, flatten_kernels, forward, load_params, predict_field, save_params,
    ArchConfig, NetworkParams,
};
use crate::rng::{derive_seed, seeded};
use crate::warp::sample_nearest;
use crate::Real;

/// Everything a training run needs; JSON config files mirror this struct
/// field-for-field, and missing fields fall back to these defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: Real,
    pub iterations: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub arch: ArchConfig,
    /// Write a checkpoint every this many iterations (0 = only the final one).
    pub checkpoint_interval: usize,
    /// Manifest of training pairs.
    pub dataset: PathBuf,
    /// Manifest used for model selection and sweep scoring.
    pub validation: Option<PathBuf>,
    /// Directory receiving checkpoints and the training log.
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            iterations: 2000,
            seed: 0,
            loss: LossConfig::default(),
            arch: ArchConfig::model_1(3),
            checkpoint_interval: 500,
            dataset: PathBuf::new(),
            validation: None,
            out_dir: PathBuf::from("train_out"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidConfig(
                "training needs at least one iteration".to_string(),
            ));
        }
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::InvalidConfig(
                "no dataset manifest configured".to_string(),
            ));
        }
        self.loss.validate()?;
        self.arch.validate()
    }

    /// Load a config from a JSON file; absent fields take defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Bias-corrected first/second-moment accumulators for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Real>,
    pub v: Vec<Real>,
    pub step: u64,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update on a flat parameter vector:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², both bias-corrected, then
/// θ ← θ − lr·m̂/(√v̂ + ε). A non-finite gradient rejects the step without
/// touching the parameters or the state.
pub fn adam_step(
    theta: &mut [Real],
    grad: &[Real],
    state: &mut AdamState,
    lr: Real,
) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step size mismatch: {} params, {} grads, {} accumulators",
            theta.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!(
            "component {i} of {} is {}",
            grad.len(),
            grad[i]
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..theta.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct TrainLogRow {
    pub iter: usize,
    pub loss: Real,
    pub cc_term: Real,
    pub smooth_term: Real,
    pub wall_ms: Real,
}

/// The results of a training run.
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: Vec<TrainLogRow>,
    /// Checkpoints written, chronological; the final one is always last.
    pub checkpoints: Vec<PathBuf>,
}

/// Write the training log as `iter,loss,cc_term,smooth_term,wall_ms`.
pub fn write_train_log_csv(rows: &[TrainLogRow], path: &Path) -> Result<()> {
    let mut text = String::from("iter,loss,cc_term,smooth_term,wall_ms\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.3}\n",
            r.iter, r.loss, r.cc_term, r.smooth_term, r.wall_ms
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run the training loop. Artifacts land in `cfg.out_dir`: periodic
/// checkpoints `ckpt_NNNNNN.ckpt`, a final `ckpt_final.ckpt`, and `log.csv`.
/// A non-finite loss aborts after saving the still-finite parameters to
/// `ckpt_last_good.ckpt`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.dataset)?;
    if ds.is_empty() {
        return Err(Error::Dataset(format!(
            "training manifest {} has no pairs",
            cfg.dataset.display()
        )));
    }
    let pairs = ds.load_all()?;
    let shape = pairs[0].fixed.shape.clone();
    for (i, p) in pairs.iter().enumerate() {
        if p.fixed.shape != shape {
            return Err(Error::shape_mismatch(
                &format!("pair {i} disagrees with pair 0"),
                &p.fixed.shape,
                &shape,
            ));
        }
    }
    if shape.len() != cfg.arch.spatial_rank {
        return Err(Error::InvalidConfig(format!(
            "architecture is rank {} but the data is rank {}",
            cfg.arch.spatial_rank,
            shape.len()
        )));
    }
    let factor = cfg.arch.downsample_factor();
    if shape.iter().any(|&d| d % factor != 0) {
        return Err(Error::InvalidConfig(format!(
            "shape {shape:?} is not divisible by the architecture's factor {factor}"
        )));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let mut params = build_network(&cfg.arch, cfg.seed)?;
    let mut adam = AdamState::new(params.num_params());
    let mut sampler = seeded(derive_seed(cfg.seed, 0x5A4D));
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();

    for it in 1..=cfg.iterations {
        let t0 = Instant::now();
        let k = sampler.random_range(0..pairs.len());
        let pair = &pairs[k];
        let (field, cache) = forward(&params, &pair.fixed, &pair.moving)?;
        let tl = total_loss(&pair.fixed, &pair.moving, &field, &cfg.loss)?;
        if !tl.value.is_finite() {
            let rescue = cfg.out_dir.join("ckpt_last_good.ckpt");
            save_params(&params, &rescue)?;
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        let grads = backward(&params, &cache, &tl.grad_field)?;
        let flat_grad = flatten_kernels(&grads);
        let mut flat = params.flatten();
        if let Err(e) = adam_step(&mut flat, &flat_grad, &mut adam, cfg.learning_rate) {
            let rescue = cfg.out_dir.join("ckpt_last_good.ckpt");
            save_params(&params, &rescue)?;
            return Err(e);
        }
        params.set_from_flat(&flat);
        log.push(TrainLogRow {
            iter: it,
            loss: tl.value,
            cc_term: tl.cc_term,
            smooth_term: tl.smooth_term,
            wall_ms: t0.elapsed().as_secs_f64() as Real * 1e3,
        });
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 {
            let path = cfg.out_dir.join(format!("ckpt_{it:06}.ckpt"));
            save_params(&params, &path)?;
            checkpoints.push(path);
        }
    }
    let final_path = cfg.out_dir.join("ckpt_final.ckpt");
    save_params(&params, &final_path)?;
    checkpoints.push(final_path);
    write_train_log_csv(&log, &cfg.out_dir.join("log.csv"))?;
    Ok(TrainOutcome {
        params,
        log,
        checkpoints,
    })
}

/// Mean validation Dice of a field-producing closure over a manifest:
/// for each pair, warp the moving segmentation by the produced field and
/// average Dice over every label present in both of the pair's raw maps.
fn mean_dice_over(
    manifest_path: &Path,
    mut field_for: impl FnMut(&crate::dataset::LoadedPair) -> Result<crate::warp::DisplacementField>,
) -> Result<Real> {
    let ds = Dataset::open(manifest_path)?;
    if ds.is_empty() {
        return Err(Error::Dataset(format!(
            "validation manifest {} has no pairs",
            manifest_path.display()
        )));
    }
    let mut scores = Vec::new();
    for i in 0..ds.len() {
        let pair = ds.load_pair(i)?;
        let field = field_for(&pair)?;
        let warped = sample_nearest(&pair.seg_moving, &field)?;
        let labels_f = pair.seg_fixed.label_set();
        let labels_m = pair.seg_moving.label_set();
        for &l in labels_f.iter().filter(|&&l| l > 0) {
            if labels_m.contains(&l) {
                scores.push(crate::eval::dice(&pair.seg_fixed, &warped, l)?);
            }
        }
    }
    if scores.is_empty() {
        return Err(Error::Dataset(
            "no shared labels between fixed and moving segmentations".to_string(),
        ));
    }
    Ok(scores.iter().sum::<Real>() / scores.len() as Real)
}

/// Mean validation Dice of a trained network over a manifest.
pub fn validation_dice(params: &NetworkParams, manifest_path: &Path) -> Result<Real> {
    mean_dice_over(manifest_path, |pair| {
        predict_field(params, &pair.fixed, &pair.moving)
    })
}

/// Mean validation Dice of the zero field (the unregistered baseline),
/// scored by the same routine as [`validation_dice`] for fair comparison.
pub fn identity_validation_dice(manifest_path: &Path) -> Result<Real> {
    mean_dice_over(manifest_path, |pair| {
        Ok(crate::warp::DisplacementField::zeros(&pair.fixed.shape))
    })
}

/// Mean smoothness energy of the fields a network predicts over a manifest.
pub fn mean_predicted_smoothness(params: &NetworkParams, manifest_path: &Path) -> Result<Real> {
    let ds = Dataset::open(manifest_path)?;
    if ds.is_empty() {
        return Err(Error::Dataset(format!(
            "manifest {} has no pairs",
            manifest_path.display()
        )));
    }
    let mut total = 0.0;
    for i in 0..ds.len() {
        let pair = ds.load_pair(i)?;
        let field = predict_field(params, &pair.fixed, &pair.moving)?;
        total += diffusion_reg(&field);
    }
    Ok(total / ds.len() as Real)
}

/// Score every checkpoint by mean validation Dice and return the best path
/// with its score. Ties within 1e-12 go to the latest checkpoint in the
/// given order.
pub fn select_model(
    checkpoints: &[PathBuf],
    validation_manifest: &Path,
) -> Result<(PathBuf, Real)> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument(
            "select_model needs at least one checkpoint".to_string(),
        ));
    }
    let mut best: Option<(PathBuf, Real)> = None;
    for path in checkpoints {
        let params = load_params(path)?;
        let score = validation_dice(&params, validation_manifest)?;
        let replace = match &best {
            None => true,
            Some((_, b)) => score >= b - 1e-12,
        };
        if replace {
            let carried = best.map(|(_, b)| b).unwrap_or(Real::NEG_INFINITY);
            best = Some((path.clone(), score.max(carried)));
        }
    }
    Ok(best.expect("non-empty checkpoint list"))
}

/// One sweep result.
#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub lambda: Real,
    pub mean_dice: Real,
    pub mean_smooth_energy: Real,
}

/// Write sweep rows as `lambda,mean_dice,mean_smooth_energy`.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut text = String::from("lambda,mean_dice,mean_smooth_energy\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.6},{:.6}\n",
            r.lambda, r.mean_dice, r.mean_smooth_energy
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train one network per regularization weight (shared seed and budget) and
/// score each on the validation manifest. Duplicate weights are dropped with
/// a warning. Artifacts for each weight land in `out_dir/lambda_<λ>/`.
pub fn sweep_lambda(base: &TrainConfig, grid: &[Real]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs a non-empty lambda grid".to_string(),
        ));
    }
    let validation = base.validation.clone().ok_or_else(|| {
        Error::InvalidConfig("sweep needs a validation manifest".to_string())
    })?;
    let mut seen: Vec<Real> = Vec::new();
    let mut rows = Vec::new();
    for &lambda in grid {
        if seen.contains(&lambda) {
            eprintln!("warning: duplicate lambda {lambda} in grid, skipping");
            continue;
        }
        seen.push(lambda);
        let mut cfg = base.clone();
        cfg.loss.lambda = lambda;
        cfg.out_dir = base.out_dir.join(format!("lambda_{lambda}"));
        let outcome = train(&cfg)?;
        rows.push(SweepRow {
            lambda,
            mean_dice: validation_dice(&outcome.params, &validation)?,
            mean_smooth_energy: mean_predicted_smoothness(&outcome.params, &validation)?,
        });
    }
    Ok(rows)
}
