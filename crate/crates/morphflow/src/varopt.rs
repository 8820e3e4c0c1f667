//! Per-pair variational registration: the non-learning baseline.
//!
//! Instead of predicting a displacement field with a network, this module
//! optimizes the field directly for one (fixed, moving) pair by gradient
//! descent on the very same energy the network trains against. A coarse-to-
//! fine pyramid (2× average-downsampled copies of both volumes) lets large
//! displacements be found cheaply at low resolution and refined upward.
//! A backtracking line search guarantees the energy log is strictly
//! decreasing within every level, so the baseline needs no step-size tuning.
//!
//! Sharing the loss with the learned model means runtime comparisons between
//! the two isolate exactly one variable: whether the per-pair optimization
//! has been amortized into a network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{total_energy, total_loss, LossConfig};
use crate::volume::Volume;
use crate::warp::DisplacementField;
use crate::{num_voxels, Real};

/// Settings for [`optimize_pair`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct VarOptConfig {
    /// Gradient-descent iterations budgeted at each pyramid level.
    pub iterations_per_level: usize,
    /// Largest step the line search will try. Backtracking halves from here,
    /// so this is a ceiling, not a tuning knob.
    pub step_size: Real,
    /// Number of pyramid resolutions, full resolution included (1 = no
    /// pyramid). Volume dims must be divisible by 2^(levels − 1).
    pub levels: usize,
    pub loss: LossConfig,
}

impl Default for VarOptConfig {
    fn default() -> Self {
        VarOptConfig {
            iterations_per_level: 60,
            step_size: 1.0,
            levels: 3,
            loss: LossConfig::default(),
        }
    }
}

impl VarOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidConfig(
                "varopt needs at least one pyramid level".to_string(),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step_size must be finite and positive, got {}",
                self.step_size
            )));
        }
        self.loss.validate()
    }
}

/// One entry of the per-iteration energy log. `level` counts down toward 0 =
/// full resolution; `iteration` 0 records the energy before the first step of
/// that level.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyRow {
    pub level: usize,
    pub iteration: usize,
    pub energy: Real,
}

/// 2^n-block averaging; every dimension must be even.
pub fn downsample_avg(v: &Volume) -> Result<Volume> {
    let rank = v.rank();
    if v.shape.iter().any(|&d| d % 2 != 0) {
        return Err(Error::InvalidArgument(format!(
            "downsample needs even dims, got {:?}",
            v.shape
        )));
    }
    let out_shape: Vec<usize> = v.shape.iter().map(|&d| d / 2).collect();
    let in_st = crate::strides(&v.shape);
    let mut out = Volume::zeros(&out_shape);
    let n_corners = 1usize << rank;
    let inv = 1.0 as Real / n_corners as Real;
    let mut idx = vec![0usize; rank];
    for o in 0..out.len() {
        let base: usize = idx.iter().zip(in_st.iter()).map(|(&i, &s)| 2 * i * s).sum();
        let mut acc = 0.0;
        for corner in 0..n_corners {
            let mut off = 0usize;
            for (d, &s) in in_st.iter().enumerate() {
                if corner >> d & 1 == 1 {
                    off += s;
                }
            }
            acc += v.data[base + off];
        }
        out.data[o] = acc * inv;
        crate::next_index(&mut idx, &out_shape);
    }
    Ok(out)
}

/// Double the grid: nearest-neighbor replication of each offset vector, with
/// the offsets themselves scaled ×2 so they span the same physical distance
/// on the finer grid.
pub fn upsample_field(field: &DisplacementField) -> DisplacementField {
    let rank = field.rank();
    let out_shape: Vec<usize> = field.shape.iter().map(|&d| d * 2).collect();
    let in_st = crate::strides(&field.shape);
    let n_in = field.num_voxels();
    let n_out = num_voxels(&out_shape);
    let mut out = DisplacementField::zeros(&out_shape);
    let mut idx = vec![0usize; rank];
    for o in 0..n_out {
        let src: usize = idx.iter().zip(in_st.iter()).map(|(&i, &s)| (i / 2) * s).sum();
        for d in 0..rank {
            out.offsets[d * n_out + o] = 2.0 * field.offsets[d * n_in + src];
        }
        crate::next_index(&mut idx, &out_shape);
    }
    out
}

/// Optimize a displacement field for one pair by coarse-to-fine gradient
/// descent. Returns the full-resolution field and the per-iteration energy
/// log, which is strictly decreasing within each level.
pub fn optimize_pair(
    f: &Volume,
    m: &Volume,
    cfg: &VarOptConfig,
) -> Result<(DisplacementField, Vec<EnergyRow>)> {
    optimize_core(f, m, cfg, None)
}

/// Like [`optimize_pair`] but stops as soon as the full-resolution energy
/// drops to `target` or below. Used by runtime benchmarks that measure how
/// long the baseline needs to match a reference energy.
pub fn optimize_pair_with_target(
    f: &Volume,
    m: &Volume,
    cfg: &VarOptConfig,
    target: Real,
) -> Result<(DisplacementField, Vec<EnergyRow>)> {
    optimize_core(f, m, cfg, Some(target))
}

fn optimize_core(
    f: &Volume,
    m: &Volume,
    cfg: &VarOptConfig,
    target: Option<Real>,
) -> Result<(DisplacementField, Vec<EnergyRow>)> {
    cfg.validate()?;
    if f.shape != m.shape {
        return Err(Error::shape_mismatch(
            "optimize_pair inputs",
            &f.shape,
            &m.shape,
        ));
    }
    let divisor = 1usize << (cfg.levels - 1);
    if f.shape.iter().any(|&d| d % divisor != 0) {
        return Err(Error::InvalidArgument(format!(
            "shape {:?} is not divisible by 2^(levels-1) = {divisor}",
            f.shape
        )));
    }

    // Build the pyramids, index 0 = full resolution.
    let mut fs = vec![f.clone()];
    let mut ms = vec![m.clone()];
    for l in 1..cfg.levels {
        fs.push(downsample_avg(&fs[l - 1])?);
        ms.push(downsample_avg(&ms[l - 1])?);
    }

    let mut field = DisplacementField::zeros(&fs[cfg.levels - 1].shape);
    let mut log = Vec::new();
    for l in (0..cfg.levels).rev() {
        if l != cfg.levels - 1 {
            field = upsample_field(&field);
        }
        let (ff, mm) = (&fs[l], &ms[l]);
        let mut energy = total_energy(ff, mm, &field, &cfg.loss)?;
        if !energy.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: 0 });
        }
        log.push(EnergyRow {
            level: l,
            iteration: 0,
            energy,
        });
        if l == 0 && target.is_some_and(|t| energy <= t) {
            return Ok((field, log));
        }
        // The accepted step carries over between iterations (growing again on
        // success, capped at the configured ceiling) so backtracking does not
        // restart from scratch every time.
        let mut step = cfg.step_size;
        for it in 1..=cfg.iterations_per_level {
            let tl = total_loss(ff, mm, &field, &cfg.loss)?;
            if !tl.grad_field.is_finite() {
                return Err(Error::NonFiniteGradient(format!(
                    "level {l} iteration {it}"
                )));
            }
            let mut s = step;
            let mut accepted = false;
            for _ in 0..=10 {
                let mut trial = field.clone();
                for (t, g) in trial.offsets.iter_mut().zip(tl.grad_field.offsets.iter()) {
                    *t -= s * g;
                }
                let e = total_energy(ff, mm, &trial, &cfg.loss)?;
                if e.is_finite() && e < energy {
                    field = trial;
                    energy = e;
                    step = (s * 2.0).min(cfg.step_size);
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if !accepted {
                // No descending step within 10 halvings: the level has
                // converged to line-search precision.
                break;
            }
            log.push(EnergyRow {
                level: l,
                iteration: it,
                energy,
            });
            if l == 0 && target.is_some_and(|t| energy <= t) {
                return Ok((field, log));
            }
        }
    }
    Ok((field, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dice;
    use crate::synth::{generate_pair, PhantomSpec};
    use crate::warp::sample_nearest;

    #[test]
    fn downsample_averages_blocks() {
        let v = Volume::new(vec![4], vec![0.0, 2.0, 4.0, 6.0]);
        let d = downsample_avg(&v).unwrap();
        assert_eq!(d.data, vec![1.0, 5.0]);

        let c = Volume::new(vec![4, 4], vec![3.5; 16]);
        let dc = downsample_avg(&c).unwrap();
        assert_eq!(dc.shape, vec![2, 2]);
        assert!(dc.data.iter().all(|&x| x == 3.5));

        let odd = Volume::new(vec![3, 4], vec![0.0; 12]);
        assert!(downsample_avg(&odd).is_err());
    }

    #[test]
    fn upsample_doubles_grid_and_offsets() {
        let mut field = DisplacementField::zeros(&[2, 2]);
        for v in &mut field.offsets {
            *v = 1.0;
        }
        let up = upsample_field(&field);
        assert_eq!(up.shape, vec![4, 4]);
        assert!(up.offsets.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn aligned_inputs_stay_put() {
        let spec = PhantomSpec {
            shape: vec![32, 32],
            n_structures: 2,
            seed: 5,
            ..PhantomSpec::default()
        };
        let pair = generate_pair(&spec).unwrap();
        let cfg = VarOptConfig {
            iterations_per_level: 20,
            levels: 2,
            ..VarOptConfig::default()
        };
        let zero_energy =
            total_energy(&pair.fixed, &pair.fixed, &DisplacementField::zeros(&spec.shape), &cfg.loss)
                .unwrap();
        let (field, log) = optimize_pair(&pair.fixed, &pair.fixed, &cfg).unwrap();
        let mean_u: Real = field.offsets.iter().map(|v| v.abs()).sum::<Real>()
            / field.offsets.len() as Real;
        assert!(mean_u < 0.1, "drifted from identity: mean |u| = {mean_u}");
        // Not exactly stationary: the epsilon in the CC denominator lets tiny
        // contrast-raising steps win microscopically, so allow 0.1% drift.
        let final_energy = log.last().unwrap().energy;
        assert!(
            (final_energy - zero_energy).abs() <= 1e-3 * zero_energy.abs().max(1.0),
            "energy moved from {zero_energy} to {final_energy} on aligned inputs"
        );

        // Warping the segmentation by the near-zero field must not cost Dice.
        let warped = sample_nearest(&pair.seg_fixed, &field).unwrap();
        for l in [1, 2] {
            let d = dice(&pair.seg_fixed, &warped, l).unwrap();
            assert!(d >= 0.98, "label {l} degraded to Dice {d}");
        }
    }

    #[test]
    fn zero_iterations_returns_zero_field() {
        let spec = PhantomSpec {
            shape: vec![16, 16],
            n_structures: 1,
            seed: 2,
            ..PhantomSpec::default()
        };
        let pair = generate_pair(&spec).unwrap();
        let cfg = VarOptConfig {
            iterations_per_level: 0,
            levels: 2,
            ..VarOptConfig::default()
        };
        let (field, log) = optimize_pair(&pair.fixed, &pair.moving, &cfg).unwrap();
        assert!(field.offsets.iter().all(|&v| v == 0.0));
        assert_eq!(log.len(), 2, "expected only the initial row per level");
    }

    #[test]
    fn misaligned_pair_energy_decreases_and_dice_improves() {
        let spec = PhantomSpec {
            shape: vec![32, 32],
            n_structures: 2,
            deform_amplitude: 3.0,
            deform_smoothness: 4.0,
            seed: 17,
        };
        let pair = generate_pair(&spec).unwrap();
        let cfg = VarOptConfig {
            iterations_per_level: 40,
            levels: 3,
            ..VarOptConfig::default()
        };
        let zero_energy = total_energy(
            &pair.fixed,
            &pair.moving,
            &DisplacementField::zeros(&spec.shape),
            &cfg.loss,
        )
        .unwrap();
        let (field, log) = optimize_pair(&pair.fixed, &pair.moving, &cfg).unwrap();

        // Strictly decreasing within each level.
        for pair_rows in log.windows(2) {
            if pair_rows[0].level == pair_rows[1].level {
                assert!(
                    pair_rows[1].energy < pair_rows[0].energy,
                    "energy rose within level {}",
                    pair_rows[0].level
                );
            }
        }
        let final_energy = log.last().unwrap().energy;
        assert!(
            final_energy < zero_energy - 0.05 * zero_energy.abs(),
            "no real progress: {zero_energy} -> {final_energy}"
        );

        let warped = sample_nearest(&pair.seg_moving, &field).unwrap();
        for l in [1, 2] {
            let before = dice(&pair.seg_fixed, &pair.seg_moving, l).unwrap();
            let after = dice(&pair.seg_fixed, &warped, l).unwrap();
            assert!(
                after > before,
                "label {l}: Dice {before:.3} -> {after:.3} did not improve"
            );
        }
    }

    #[test]
    fn early_stop_halts_at_target_energy() {
        let spec = PhantomSpec {
            shape: vec![32, 32],
            n_structures: 2,
            deform_amplitude: 3.0,
            seed: 8,
            ..PhantomSpec::default()
        };
        let pair = generate_pair(&spec).unwrap();
        let cfg = VarOptConfig {
            iterations_per_level: 40,
            levels: 2,
            ..VarOptConfig::default()
        };
        let (_, full_log) = optimize_pair(&pair.fixed, &pair.moving, &cfg).unwrap();
        let final_energy = full_log.last().unwrap().energy;
        // Ask for a target midway through the full run's progress: the
        // truncated run must stop earlier yet reach it.
        let start = full_log.iter().find(|r| r.level == 0).unwrap().energy;
        let target = 0.5 * (start + final_energy);
        let (_, short_log) =
            optimize_pair_with_target(&pair.fixed, &pair.moving, &cfg, target).unwrap();
        assert!(short_log.len() < full_log.len());
        assert!(short_log.last().unwrap().energy <= target);
    }

    #[test]
    fn indivisible_shapes_are_rejected() {
        let f = Volume::zeros(&[18, 18]);
        let cfg = VarOptConfig {
            levels: 3,
            ..VarOptConfig::default()
        };
        assert!(optimize_pair(&f, &f, &cfg).is_err());
    }
}
