//! Synthetic phantoms with labeled structures and known smooth warps.
//!
//! Desk-scale training and evaluation need pairs whose true correspondence is
//! known. [`make_phantom`] builds an intensity volume of smooth blobs over a
//! soft background, each blob carrying a distinct mean intensity and a
//! segmentation label. [`make_random_smooth_field`] draws a random displacement
//! field (blurred white noise, rescaled to a chosen peak magnitude), and
//! [`generate_pair`] warps the phantom by such a field to produce a (fixed,
//! moving) pair with segmentations plus the generator field itself.
//! [`write_dataset`] stores an atlas phantom and many warped copies of it on
//! disk together with a manifest.
//!
//! Everything is a pure function of the parameters and seed: identical inputs
//! give bit-identical outputs on a given platform.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, PairEntry};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::volume::{save_segmentation, save_volume, SegmentationMap, Volume};
use crate::warp::{sample_linear, sample_nearest, DisplacementField};
use crate::{for_each_lane, num_voxels, Real};

/// Recipe for one synthetic phantom and the deformations applied to it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Volume shape, slowest axis first. Rank 2 or 3.
    pub shape: Vec<usize>,
    /// Number of labeled blobs to place.
    pub n_structures: usize,
    /// Peak displacement magnitude, in voxels, of the ground-truth warps.
    pub deform_amplitude: Real,
    /// Gaussian blur radius, in voxels, applied to the random offsets.
    pub deform_smoothness: Real,
    /// Base RNG seed; all derived streams fan out from this.
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: vec![32, 32, 32],
            n_structures: 4,
            deform_amplitude: 3.0,
            deform_smoothness: 4.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let rank = self.shape.len();
        if !(2..=3).contains(&rank) {
            return Err(Error::InvalidConfig(format!(
                "phantom shape must have rank 2 or 3, got {rank}"
            )));
        }
        if self.shape.iter().any(|&d| d < 8) {
            return Err(Error::InvalidConfig(format!(
                "phantom dims must be at least 8, got {:?}",
                self.shape
            )));
        }
        if self.n_structures < 1 {
            return Err(Error::InvalidConfig(
                "n_structures must be at least 1".to_string(),
            ));
        }
        if !(self.deform_amplitude >= 0.0 && self.deform_amplitude.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "deform_amplitude must be finite and non-negative, got {}",
                self.deform_amplitude
            )));
        }
        if !(self.deform_smoothness > 0.0 && self.deform_smoothness.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "deform_smoothness must be finite and positive, got {}",
                self.deform_smoothness
            )));
        }
        Ok(())
    }
}

/// A synthesized registration pair with its generator field.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub seg_fixed: SegmentationMap,
    pub seg_moving: SegmentationMap,
    /// The field used to create `moving` from `fixed`
    /// (`moving(p) = fixed(p + gt_field(p))`).
    pub gt_field: DisplacementField,
}

/// Separable Gaussian blur with zero padding, in place.
fn gaussian_blur(data: &mut [Real], shape: &[usize], sigma: Real) {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for t in -(radius as isize)..=(radius as isize) {
        let x = t as Real / sigma;
        let w = (-0.5 * x * x).exp();
        kernel.push(w);
        sum += w;
    }
    for w in &mut kernel {
        *w /= sum;
    }
    let mut lane = Vec::new();
    let mut out = vec![0.0 as Real; data.len()];
    for axis in 0..shape.len() {
        let len = shape[axis];
        for_each_lane(shape, axis, |base, stride| {
            lane.clear();
            lane.extend((0..len).map(|k| data[base + k * stride]));
            for k in 0..len {
                let mut acc = 0.0;
                let lo = k.saturating_sub(radius);
                let hi = (k + radius).min(len - 1);
                for j in lo..=hi {
                    acc += kernel[j + radius - k] * lane[j];
                }
                out[base + k * stride] = acc;
            }
        });
        data.copy_from_slice(&out);
    }
}

/// Draw the per-axis semi-axes of one blob, scaled to the smallest volume
/// dimension. 2D blobs are strongly elongated ellipses (aspect 2.3–3.2):
/// at equal area an elongated structure loses far more overlap per voxel of
/// misalignment than a disk, which keeps the unregistered baseline honest
/// while the area still clears the 100-voxel structure filter at 64².
/// 3D blobs are mildly anisotropic ellipsoids with volume preserved.
fn draw_semi_axes(rng: &mut crate::rng::Rng, rank: usize, min_dim: Real) -> Vec<Real> {
    if rank == 2 {
        let r = rng.random_range(0.099..=0.109) * min_dim;
        let aspect: Real = rng.random_range(2.6..=3.4);
        let long = rng.random_range(0..2usize);
        let (a, b) = (r * aspect.sqrt(), r / aspect.sqrt());
        if long == 0 {
            vec![a, b]
        } else {
            vec![b, a]
        }
    } else {
        let r = rng.random_range(0.10..=0.16) * min_dim;
        let mut scales: Vec<Real> = (0..rank).map(|_| rng.random_range(0.8..=1.35)).collect();
        let gm = (scales.iter().map(|s| s.ln()).sum::<Real>() / rank as Real).exp();
        for s in &mut scales {
            *s *= r / gm;
        }
        scales
    }
}

/// Support radius of an axis-aligned ellipsoid in direction `dir` (unit
/// vector): the half-extent of its bounding slab along that direction. Two
/// ellipsoids whose center distance exceeds the sum of their support radii
/// along the center line are disjoint.
fn support_radius(semi: &[Real], dir: &[Real]) -> Real {
    semi.iter()
        .zip(dir.iter())
        .map(|(s, d)| (s * d) * (s * d))
        .sum::<Real>()
        .sqrt()
}

/// Build the phantom: smooth low-intensity background plus `n_structures`
/// non-overlapping blobs with distinct mean intensities and labels 1..=n.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, SegmentationMap)> {
    spec.validate()?;
    let shape = &spec.shape;
    let rank = shape.len();
    let n = num_voxels(shape);

    // Background: blurred white noise squeezed into [0.05, 0.25].
    let mut bg_rng = seeded(derive_seed(spec.seed, 0));
    let mut intensity: Vec<Real> = (0..n).map(|_| bg_rng.random_range(0.0..1.0)).collect();
    gaussian_blur(&mut intensity, shape, 3.0);
    let lo = intensity.iter().cloned().fold(Real::INFINITY, Real::min);
    let hi = intensity.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let span = (hi - lo).max(1e-12);
    for v in &mut intensity {
        *v = 0.05 + 0.20 * (*v - lo) / span;
    }

    // Blob placement: random centers and radii with pairwise separation, by
    // rejection sampling. If a layout cannot be completed the whole
    // configuration is redrawn; persistent failure means the shape is too
    // small for the requested count.
    let min_dim = *shape.iter().min().expect("non-empty shape") as Real;
    let mut place_rng = seeded(derive_seed(spec.seed, 1));
    let mut layout: Vec<(Vec<Real>, Vec<Real>)> = Vec::new();
    'config: for _restart in 0..20 {
        layout.clear();
        for _ in 0..spec.n_structures {
            let mut placed = false;
            'attempt: for _ in 0..200 {
                let semi = draw_semi_axes(&mut place_rng, rank, min_dim);
                let mut center = Vec::with_capacity(rank);
                for (d, &dim) in shape.iter().enumerate() {
                    let margin = semi[d] + 2.0;
                    let max = dim as Real - 1.0 - margin;
                    if max <= margin {
                        continue 'attempt;
                    }
                    center.push(place_rng.random_range(margin..=max));
                }
                for (c2, semi2) in &layout {
                    let diff: Vec<Real> =
                        center.iter().zip(c2.iter()).map(|(a, b)| a - b).collect();
                    let dist = diff.iter().map(|d| d * d).sum::<Real>().sqrt();
                    if dist < 1e-9 {
                        continue 'attempt;
                    }
                    let dir: Vec<Real> = diff.iter().map(|d| d / dist).collect();
                    let need = support_radius(&semi, &dir) + support_radius(semi2, &dir) + 3.0;
                    if dist < need {
                        continue 'attempt;
                    }
                }
                layout.push((center, semi));
                placed = true;
                break;
            }
            if !placed {
                continue 'config;
            }
        }
        break;
    }
    if layout.len() < spec.n_structures {
        return Err(Error::InvalidConfig(format!(
            "shape {:?} is too small to place {} structures of the minimum size",
            shape, spec.n_structures
        )));
    }

    // Rasterize: a blob is a Gaussian bump; the label mask is its 0.5 level
    // set (distance ≤ r) and the intensity blends from background to the
    // blob's level across the bump's shoulder. The 0.97 blend cap keeps blob
    // interiors gently textured instead of perfectly flat.
    let st = crate::strides(shape);
    let mut labels = vec![0i32; n];
    let half_ln2_norm = (2.0 as Real * (2.0 as Real).ln()).sqrt();
    for (i, (center, semi)) in layout.iter().enumerate() {
        let level = if spec.n_structures == 1 {
            0.40
        } else {
            0.40 + 0.55 * i as Real / (spec.n_structures - 1) as Real
        };
        // Per-axis Gaussian widths chosen so the bump's 0.5 level set is the
        // ellipse with the drawn semi-axes.
        let sigma: Vec<Real> = semi.iter().map(|s| s / half_ln2_norm).collect();
        let lo_hi: Vec<(usize, usize)> = center
            .iter()
            .zip(semi.iter())
            .zip(shape.iter())
            .map(|((&c, &s), &dim)| {
                let lo = (c - s - 1.0).floor().max(0.0) as usize;
                let hi = ((c + s + 1.0).ceil() as usize).min(dim - 1);
                (lo, hi)
            })
            .collect();
        let mut idx: Vec<usize> = lo_hi.iter().map(|&(lo, _)| lo).collect();
        loop {
            let d2: Real = idx
                .iter()
                .zip(center.iter())
                .zip(sigma.iter())
                .map(|((&p, &c), &s)| {
                    let d = (p as Real - c) / s;
                    d * d
                })
                .sum();
            let b = (-0.5 * d2).exp();
            if b >= 0.5 {
                let flat: usize = idx.iter().zip(st.iter()).map(|(&p, &s)| p * s).sum();
                labels[flat] = (i + 1) as i32;
                let s_blend = (((b - 0.5) / 0.35) as Real).min(1.0) * 0.97;
                intensity[flat] += s_blend * (level - intensity[flat]);
            } else if b >= 0.2 {
                // Soft skirt just outside the label: pull partway toward the
                // level so the boundary has a gradient instead of a step.
                let flat: usize = idx.iter().zip(st.iter()).map(|(&p, &s)| p * s).sum();
                let s_blend = ((b - 0.2) / 0.3) * 0.45;
                intensity[flat] += s_blend * (level - intensity[flat]);
            }
            // Advance within the bounding box.
            let mut done = true;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] <= lo_hi[d].1 {
                    done = false;
                    break;
                }
                idx[d] = lo_hi[d].0;
            }
            if done {
                break;
            }
        }
    }

    Ok((
        Volume::new(shape.clone(), intensity),
        SegmentationMap::new(shape.clone(), labels),
    ))
}

/// Draw a random smooth displacement field: per-channel white noise, blurred
/// with a Gaussian of radius `smoothness`, then rescaled so the largest
/// offset vector has magnitude exactly `amplitude`. Amplitude 0 gives the
/// zero field.
pub fn make_random_smooth_field(
    shape: &[usize],
    amplitude: Real,
    smoothness: Real,
    seed: u64,
) -> Result<DisplacementField> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "amplitude must be finite and non-negative, got {amplitude}"
        )));
    }
    if !(smoothness > 0.0 && smoothness.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothness must be finite and positive, got {smoothness}"
        )));
    }
    let rank = shape.len();
    let n = num_voxels(shape);
    let mut field = DisplacementField::zeros(shape);
    if amplitude == 0.0 {
        return Ok(field);
    }
    let mut rng = seeded(seed);
    for d in 0..rank {
        let ch = field.channel_mut(d);
        for v in ch.iter_mut() {
            *v = rng.random_range(-1.0..=1.0);
        }
        gaussian_blur(ch, shape, smoothness);
    }
    let mut max_mag2: Real = 0.0;
    for p in 0..n {
        let mut m2 = 0.0;
        for d in 0..rank {
            let u = field.offsets[d * n + p];
            m2 += u * u;
        }
        max_mag2 = max_mag2.max(m2);
    }
    if max_mag2 > 0.0 {
        let scale = amplitude / max_mag2.sqrt();
        for v in &mut field.offsets {
            *v *= scale;
        }
    }
    Ok(field)
}

/// Synthesize one registration pair: the phantom as fixed image and a warped
/// copy as moving image, with segmentations warped by nearest-neighbor lookup.
pub fn generate_pair(spec: &PhantomSpec) -> Result<SynthPair> {
    let (fixed, seg_fixed) = make_phantom(spec)?;
    let gt_field = make_random_smooth_field(
        &spec.shape,
        spec.deform_amplitude,
        spec.deform_smoothness,
        derive_seed(spec.seed, 2),
    )?;
    let moving = sample_linear(&fixed, &gt_field)?;
    let seg_moving = sample_nearest(&seg_fixed, &gt_field)?;
    Ok(SynthPair {
        fixed,
        moving,
        seg_fixed,
        seg_moving,
        gt_field,
    })
}

/// Write a dataset of `n_pairs` pairs sharing one atlas phantom as the fixed
/// image, each moving image generated by its own random field. Produces
/// `atlas.vol`, `atlas.seg`, `pair_###.{vol,seg}`, `pair_###_gt.field`, and
/// `manifest.json` inside `dir`, and returns the manifest.
pub fn write_dataset(spec: &PhantomSpec, n_pairs: usize, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(Error::InvalidArgument(
            "a dataset needs at least one pair".to_string(),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (atlas, atlas_seg) = make_phantom(spec)?;
    save_volume(&atlas, &dir.join("atlas.vol"))?;
    save_segmentation(&atlas_seg, &dir.join("atlas.seg"))?;
    let mut manifest = DatasetManifest::default();
    for k in 0..n_pairs {
        let gt = make_random_smooth_field(
            &spec.shape,
            spec.deform_amplitude,
            spec.deform_smoothness,
            derive_seed(spec.seed, 3 + k as u64),
        )?;
        let moving = sample_linear(&atlas, &gt)?;
        let seg_moving = sample_nearest(&atlas_seg, &gt)?;
        let moving_name = format!("pair_{k:03}.vol");
        let seg_name = format!("pair_{k:03}.seg");
        let field_name = format!("pair_{k:03}_gt.field");
        save_volume(&moving, &dir.join(&moving_name))?;
        save_segmentation(&seg_moving, &dir.join(&seg_name))?;
        gt.save(&dir.join(&field_name))?;
        manifest.entries.push(PairEntry {
            fixed: "atlas.vol".to_string(),
            moving: moving_name,
            seg_fixed: "atlas.seg".to_string(),
            seg_moving: seg_name,
            gt_field: field_name,
        });
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::loss::diffusion_reg;

    fn dice_of(a: &SegmentationMap, b: &SegmentationMap, label: i32) -> Real {
        let inter = a
            .labels
            .iter()
            .zip(b.labels.iter())
            .filter(|(&x, &y)| x == label && y == label)
            .count();
        let na = a.label_volume(label);
        let nb = b.label_volume(label);
        if na + nb == 0 {
            return 1.0;
        }
        2.0 * inter as Real / (na + nb) as Real
    }

    fn mean_structure_dice(a: &SegmentationMap, b: &SegmentationMap) -> Real {
        let labels: Vec<i32> = a.label_set().into_iter().filter(|&l| l > 0).collect();
        let sum: Real = labels.iter().map(|&l| dice_of(a, b, l)).sum();
        sum / labels.len() as Real
    }

    #[test]
    fn phantom_generation_is_deterministic() {
        let spec = PhantomSpec {
            seed: 7,
            ..PhantomSpec::default()
        };
        let (v1, s1) = make_phantom(&spec).unwrap();
        let (v2, s2) = make_phantom(&spec).unwrap();
        assert_eq!(v1.data, v2.data);
        assert_eq!(s1.labels, s2.labels);
    }

    #[test]
    fn single_structure_yields_labels_zero_and_one() {
        let spec = PhantomSpec {
            n_structures: 1,
            ..PhantomSpec::default()
        };
        let (_, seg) = make_phantom(&spec).unwrap();
        assert_eq!(seg.label_set(), vec![0, 1]);
    }

    #[test]
    fn default_phantom_has_full_size_structures_in_unit_range() {
        let spec = PhantomSpec::default();
        let (vol, seg) = make_phantom(&spec).unwrap();
        assert!(vol.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let labels = seg.label_set();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        for l in 1..=4 {
            let count = seg.label_volume(l);
            assert!(count >= 100, "label {l} has only {count} voxels");
        }
    }

    #[test]
    fn structures_have_distinct_mean_intensities() {
        let (vol, seg) = make_phantom(&PhantomSpec::default()).unwrap();
        let mut means = Vec::new();
        for l in 1..=4 {
            let (mut sum, mut cnt) = (0.0, 0usize);
            for (v, &lab) in vol.data.iter().zip(seg.labels.iter()) {
                if lab == l {
                    sum += v;
                    cnt += 1;
                }
            }
            means.push(sum / cnt as Real);
        }
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                assert!(
                    (means[i] - means[j]).abs() > 0.05,
                    "labels {} and {} have means {:.3} vs {:.3}",
                    i + 1,
                    j + 1,
                    means[i],
                    means[j]
                );
            }
        }
    }

    #[test]
    fn overcrowded_shape_is_rejected() {
        let spec = PhantomSpec {
            shape: vec![10, 10],
            n_structures: 6,
            ..PhantomSpec::default()
        };
        assert!(matches!(
            make_phantom(&spec),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_amplitude_gives_zero_field_and_identical_pair() {
        let field = make_random_smooth_field(&[16, 16], 0.0, 4.0, 9).unwrap();
        assert!(field.offsets.iter().all(|&v| v == 0.0));
        let spec = PhantomSpec {
            shape: vec![24, 24],
            n_structures: 2,
            deform_amplitude: 0.0,
            ..PhantomSpec::default()
        };
        let pair = generate_pair(&spec).unwrap();
        assert_eq!(pair.fixed.data, pair.moving.data);
        for l in [1, 2] {
            assert_eq!(dice_of(&pair.seg_fixed, &pair.seg_moving, l), 1.0);
        }
    }

    #[test]
    fn field_peak_magnitude_matches_amplitude() {
        let field = make_random_smooth_field(&[20, 24, 28], 3.0, 4.0, 11).unwrap();
        let n = num_voxels(&field.shape);
        let mut max_mag: Real = 0.0;
        for p in 0..n {
            let m2: Real = (0..3)
                .map(|d| field.offsets[d * n + p].powi(2))
                .sum();
            max_mag = max_mag.max(m2.sqrt());
        }
        assert!((max_mag - 3.0).abs() < 1e-6, "peak magnitude {max_mag}");
    }

    #[test]
    fn smoother_fields_have_lower_bending_energy() {
        let shape = [32, 32];
        let smooth = make_random_smooth_field(&shape, 3.0, 4.0, 5).unwrap();
        let rough = make_random_smooth_field(&shape, 3.0, 1.0, 5).unwrap();
        let e_smooth = diffusion_reg(&smooth);
        let e_rough = diffusion_reg(&rough);
        assert!(
            e_smooth < e_rough,
            "expected smoother field to score lower: {e_smooth} vs {e_rough}"
        );
    }

    #[test]
    fn strong_warp_leaves_a_dice_gap_to_close() {
        let spec = PhantomSpec {
            deform_amplitude: 5.0,
            deform_smoothness: 4.0,
            seed: 3,
            ..PhantomSpec::default()
        };
        let pair = generate_pair(&spec).unwrap();
        let mean = mean_structure_dice(&pair.seg_fixed, &pair.seg_moving);
        assert!(mean < 0.9, "pair is too well aligned: mean Dice {mean:.3}");
    }

    #[test]
    fn negated_field_approximately_restores_fixed() {
        let spec = PhantomSpec {
            deform_amplitude: 3.0,
            deform_smoothness: 4.0,
            seed: 21,
            ..PhantomSpec::default()
        };
        let pair = generate_pair(&spec).unwrap();
        let back = sample_linear(&pair.moving, &pair.gt_field.scaled(-1.0)).unwrap();
        let mae: Real = back
            .data
            .iter()
            .zip(pair.fixed.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<Real>()
            / back.data.len() as Real;
        assert!(mae < 0.05, "round-trip mean absolute error {mae:.4}");
    }

    #[test]
    fn dataset_writes_loadable_pairs_and_is_reproducible() {
        let spec = PhantomSpec {
            shape: vec![24, 24],
            n_structures: 2,
            seed: 13,
            ..PhantomSpec::default()
        };
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let m1 = write_dataset(&spec, 3, dir1.path()).unwrap();
        let m2 = write_dataset(&spec, 3, dir2.path()).unwrap();
        assert_eq!(m1.entries.len(), 3);
        assert_eq!(m2.entries.len(), 3);

        let ds = Dataset::open(&dir1.path().join("manifest.json")).unwrap();
        let pair = ds.load_pair(1).unwrap();
        assert_eq!(pair.fixed.shape, vec![24, 24]);
        assert_eq!(pair.gt_field.rank(), 2);
        assert!(pair.moving.is_finite());

        // The same parameters must produce byte-identical files.
        for name in ["atlas.vol", "pair_002.vol", "pair_000_gt.field"] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }
}
