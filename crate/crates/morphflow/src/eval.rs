//! Quantitative evaluation: Dice overlap, structure filtering, smoothness
//! statistics, runtime benchmarks, and displacement-field visualization.
//!
//! Registration quality is judged without ground-truth correspondences by
//! warping the moving image's segmentation with the estimated field and
//! measuring per-structure volume overlap (Dice) against the fixed image's
//! segmentation. Structures too small to give stable scores are filtered out
//! by a voxel-count threshold. Field smoothness is summarized by the same
//! diffusion energy the training loss penalizes, so reports and loss speak
//! the same language.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{diffusion_reg, total_energy};
use crate::net::{predict_field, NetworkParams};
use crate::varopt::{optimize_pair_with_target, VarOptConfig};
use crate::volume::{SegmentationMap, Volume};
use crate::warp::{sample_linear, sample_nearest, DisplacementField};
use crate::Real;

/// Voxel-count threshold below which a structure is dropped from reports.
pub const DEFAULT_MIN_VOXELS: usize = 100;

/// Volume overlap 2|A∩B| / (|A|+|B|) of one label's voxel sets. Both sets
/// empty counts as perfect agreement (1); exactly one empty as total
/// disagreement (0).
pub fn dice(a: &SegmentationMap, b: &SegmentationMap, label: i32) -> Result<Real> {
    if a.shape != b.shape {
        return Err(Error::shape_mismatch("dice inputs", &a.shape, &b.shape));
    }
    if label <= 0 {
        return Err(Error::InvalidArgument(format!(
            "dice is defined for positive labels, got {label}"
        )));
    }
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (&x, &y) in a.labels.iter().zip(b.labels.iter()) {
        let in_a = x == label;
        let in_b = y == label;
        na += in_a as usize;
        nb += in_b as usize;
        inter += (in_a && in_b) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as Real / (na + nb) as Real)
}

/// Labels that appear with at least `min_voxels` voxels in EVERY provided
/// map, in ascending order. An empty map set yields an empty list.
pub fn filter_structures(maps: &[&SegmentationMap], min_voxels: usize) -> Vec<i32> {
    if maps.is_empty() {
        return Vec::new();
    }
    let mut candidates: BTreeSet<i32> = BTreeSet::new();
    for m in maps {
        candidates.extend(m.label_set().into_iter().filter(|&l| l > 0));
    }
    candidates
        .into_iter()
        .filter(|&l| maps.iter().all(|m| m.label_volume(l) >= min_voxels))
        .collect()
}

/// Where the displacement field for each evaluated pair comes from.
pub enum FieldSource<'a> {
    /// The zero field: scores the raw, unregistered alignment.
    Identity,
    /// A trained network's forward pass on each pair.
    Network(&'a NetworkParams),
    /// The aligning oracle derived from each pair's stored generator field
    /// (its approximate inverse; see [`invert_field`]).
    GroundTruth,
}

/// One Dice measurement: pair index within the manifest, structure label,
/// overlap score.
#[derive(Debug, Clone, Copy)]
pub struct DiceRow {
    pub subject: usize,
    pub label: i32,
    pub dice: Real,
}

/// Aggregated evaluation results over a manifest.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<DiceRow>,
    pub mean_dice: Real,
    pub sd_dice: Real,
    /// Mean and sd of the diffusion smoothness energy of the evaluated fields.
    pub mean_smooth: Real,
    pub sd_smooth: Real,
}

fn mean_sd(xs: &[Real]) -> (Real, Real) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<Real>() / xs.len() as Real;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / (xs.len() - 1) as Real;
    (mean, var.sqrt())
}

fn median(xs: &mut [Real]) -> Real {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Approximate inverse of a displacement field by fixed-point iteration:
/// starting from v = −u, repeatedly set v(p) = −u(p + v(p)) with linear
/// interpolation of u. For the smooth fields used here the iteration
/// contracts quickly; ten rounds leave sub-0.01-voxel residuals. The result
/// is the field that warps the *moving* image of a generated pair back onto
/// the fixed one, i.e. the oracle a perfect registration should find.
pub fn invert_field(u: &DisplacementField) -> DisplacementField {
    let rank = u.rank();
    let n = u.num_voxels();
    let channels: Vec<Volume> = (0..rank)
        .map(|d| Volume::new(u.shape.clone(), u.channel(d).to_vec()))
        .collect();
    let mut v = u.scaled(-1.0);
    for _ in 0..10 {
        let mut next = DisplacementField::zeros(&u.shape);
        for (d, chan) in channels.iter().enumerate() {
            let warped = sample_linear(chan, &v).expect("same-shape field sampling");
            next.channel_mut(d)[..n].copy_from_slice(&warped.data);
        }
        for x in &mut next.offsets {
            *x = -*x;
        }
        v = next;
    }
    v
}

/// Evaluate registration quality over every pair of a manifest: obtain a
/// field per pair from `source`, warp the moving segmentation by it
/// (nearest-neighbor), and score Dice for every structure that passes the
/// size filter in all segmentations of the manifest. Also aggregates the
/// diffusion smoothness energy of the evaluated fields.
pub fn evaluate_registration(
    source: &FieldSource,
    manifest_path: &Path,
    min_voxels: usize,
) -> Result<EvalReport> {
    let ds = Dataset::open(manifest_path)?;
    if ds.is_empty() {
        return Err(Error::Dataset(format!(
            "manifest {} has no pairs to evaluate",
            manifest_path.display()
        )));
    }
    let pairs = ds.load_all()?;
    let all_maps: Vec<&SegmentationMap> = pairs
        .iter()
        .flat_map(|p| [&p.seg_fixed, &p.seg_moving])
        .collect();
    let labels = filter_structures(&all_maps, min_voxels);
    if labels.is_empty() {
        return Err(Error::Dataset(format!(
            "no structure reaches {min_voxels} voxels in every segmentation"
        )));
    }
    let mut rows = Vec::new();
    let mut smooth = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let field = match source {
            FieldSource::Identity => DisplacementField::zeros(&p.fixed.shape),
            FieldSource::Network(params) => predict_field(params, &p.fixed, &p.moving)?,
            FieldSource::GroundTruth => invert_field(&p.gt_field),
        };
        smooth.push(diffusion_reg(&field));
        let warped = sample_nearest(&p.seg_moving, &field)?;
        for &label in &labels {
            rows.push(DiceRow {
                subject: i,
                label,
                dice: dice(&p.seg_fixed, &warped, label)?,
            });
        }
    }
    let dices: Vec<Real> = rows.iter().map(|r| r.dice).collect();
    let (mean_dice, sd_dice) = mean_sd(&dices);
    let (mean_smooth, sd_smooth) = mean_sd(&smooth);
    Ok(EvalReport {
        rows,
        mean_dice,
        sd_dice,
        mean_smooth,
        sd_smooth,
    })
}

/// One method's timing summary.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: String,
    pub median_ms: Real,
    pub sd_ms: Real,
}

/// Time network registration against the per-pair baseline on the same
/// pairs. Per method: one untimed warmup pass, then exactly `repetitions`
/// timed passes; statistics pool the per-registration wall times across
/// passes and pairs. The baseline runs with an early-stop target of the
/// network's achieved energy on that pair plus 5%, so its time answers "how
/// long to match the network's result". For that answer to be meaningful,
/// `varopt_cfg.iterations_per_level` should be large enough that the cap
/// never binds: the baseline then stops at the target or at line-search
/// convergence, whichever comes first.
pub fn benchmark_runtime(
    params: &NetworkParams,
    manifest_path: &Path,
    repetitions: usize,
    varopt_cfg: &VarOptConfig,
) -> Result<Vec<BenchRow>> {
    if repetitions < 3 {
        return Err(Error::InvalidArgument(format!(
            "benchmark needs at least 3 repetitions, got {repetitions}"
        )));
    }
    let ds = Dataset::open(manifest_path)?;
    let pairs = ds.load_all()?;
    if pairs.is_empty() {
        return Ok(Vec::new());
    }

    // Network: warmup pass, then timed passes.
    let mut targets = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let field = predict_field(params, &p.fixed, &p.moving)?;
        let e = total_energy(&p.fixed, &p.moving, &field, &varopt_cfg.loss)?;
        targets.push(e + 0.05 * e.abs());
    }
    let mut net_ms = Vec::with_capacity(repetitions * pairs.len());
    for _ in 0..repetitions {
        for p in &pairs {
            let t0 = Instant::now();
            let _ = predict_field(params, &p.fixed, &p.moving)?;
            net_ms.push(t0.elapsed().as_secs_f64() as Real * 1e3);
        }
    }

    // Baseline: warmup pass, then timed passes toward the per-pair targets.
    for (p, &t) in pairs.iter().zip(targets.iter()) {
        let _ = optimize_pair_with_target(&p.fixed, &p.moving, varopt_cfg, t)?;
    }
    let mut base_ms = Vec::with_capacity(repetitions * pairs.len());
    for _ in 0..repetitions {
        for (p, &t) in pairs.iter().zip(targets.iter()) {
            let t0 = Instant::now();
            let _ = optimize_pair_with_target(&p.fixed, &p.moving, varopt_cfg, t)?;
            base_ms.push(t0.elapsed().as_secs_f64() as Real * 1e3);
        }
    }

    let (_, net_sd) = mean_sd(&net_ms);
    let (_, base_sd) = mean_sd(&base_ms);
    Ok(vec![
        BenchRow {
            method: "network".to_string(),
            median_ms: median(&mut net_ms),
            sd_ms: net_sd,
        },
        BenchRow {
            method: "baseline".to_string(),
            median_ms: median(&mut base_ms),
            sd_ms: base_sd,
        },
    ])
}

fn offset_to_byte(v: Real) -> u8 {
    let clipped = v.clamp(-10.0, 10.0);
    (((clipped + 10.0) / 20.0) * 255.0).round() as u8
}

/// Render a field slice as an 8-bit PNG: offsets clipped to [−10, 10] and
/// mapped affinely to [0, 255], fastest axis in red, then green, then blue
/// (2D fields use red/green with a zero blue channel). For 3D fields the
/// slice is taken along `axis` at `index`; for 2D fields the whole grid is
/// exported and both slice arguments are ignored.
pub fn export_field_rgb(
    field: &DisplacementField,
    axis: usize,
    index: usize,
    path: &Path,
) -> Result<()> {
    /// Maps an (image row, image column) pair to a flat voxel index.
    type SliceIndexer = Box<dyn Fn(usize, usize) -> usize>;
    let rank = field.rank();
    let n = field.num_voxels();
    let st = crate::strides(&field.shape);
    let (height, width, at): (usize, usize, SliceIndexer) = match rank {
        2 => (
            field.shape[0],
            field.shape[1],
            Box::new(move |row, col| row * st[0] + col * st[1]),
        ),
        3 => {
            if axis >= 3 {
                return Err(Error::InvalidArgument(format!(
                    "slice axis {axis} out of range for a 3D field"
                )));
            }
            if index >= field.shape[axis] {
                return Err(Error::InvalidArgument(format!(
                    "slice index {index} out of range for axis {axis} of extent {}",
                    field.shape[axis]
                )));
            }
            let rem: Vec<usize> = (0..3).filter(|&d| d != axis).collect();
            let base = index * st[axis];
            let (s0, s1) = (st[rem[0]], st[rem[1]]);
            (
                field.shape[rem[0]],
                field.shape[rem[1]],
                Box::new(move |row, col| base + row * s0 + col * s1),
            )
        }
        r => {
            return Err(Error::InvalidArgument(format!(
                "field export supports rank 2 or 3, got {r}"
            )))
        }
    };
    let img = image::RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let p = at(y as usize, x as usize);
        // Channel order is slowest-first ((z,)y,x); the image wants x in red.
        let red = offset_to_byte(field.offsets[(rank - 1) * n + p]);
        let green = offset_to_byte(field.offsets[(rank - 2) * n + p]);
        let blue = if rank == 3 {
            offset_to_byte(field.offsets[p])
        } else {
            0
        };
        image::Rgb([red, green, blue])
    });
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Write per-measurement Dice rows as `subject,label,dice`.
pub fn write_dice_csv(rows: &[DiceRow], path: &Path) -> Result<()> {
    let mut text = String::from("subject,label,dice\n");
    for r in rows {
        text.push_str(&format!("{},{},{:.6}\n", r.subject, r.label, r.dice));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write aggregate metrics as `metric,mean,sd`.
pub fn write_summary_csv(entries: &[(&str, Real, Real)], path: &Path) -> Result<()> {
    let mut text = String::from("metric,mean,sd\n");
    for (name, mean, sd) in entries {
        text.push_str(&format!("{name},{mean:.6},{sd:.6}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write benchmark rows as `method,median_ms,sd_ms`.
pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut text = String::from("method,median_ms,sd_ms\n");
    for r in rows {
        text.push_str(&format!("{},{:.3},{:.3}\n", r.method, r.median_ms, r.sd_ms));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
