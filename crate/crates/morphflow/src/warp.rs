//! Spatial resampling through a dense displacement field.
//!
//! A field `u` maps each voxel `p` to the sample location `p + u(p)`.
//! Intensities are pulled with n-linear interpolation over the 2^n integer
//! neighbors; labels use nearest-neighbor with ties rounding toward +∞.
//! Sample coordinates outside the volume are clamped to the border, and the
//! gradient along a clamped axis is zero. At integer coordinates (where the
//! interpolant has a kink) the right-hand derivative is used.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{SegmentationMap, Volume};
use crate::{num_voxels, strides, Real};

/// Dense per-voxel displacement, one offset per axis in voxel units.
///
/// Offsets are stored channel-slowest: `offsets[d * nvox + i]` holds the
/// axis-`d` component at linear voxel index `i`, with axes in canonical
/// slowest-first order (so channel 0 is the z offset for 3D).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub shape: Vec<usize>,
    pub offsets: Vec<Real>,
}

impl DisplacementField {
    pub fn new(shape: Vec<usize>, offsets: Vec<Real>) -> Self {
        assert_eq!(
            shape.len() * num_voxels(&shape),
            offsets.len(),
            "offsets must hold rank * voxel-count scalars"
        );
        DisplacementField { shape, offsets }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        DisplacementField {
            shape: shape.to_vec(),
            offsets: vec![0.0; shape.len() * num_voxels(shape)],
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn num_voxels(&self) -> usize {
        num_voxels(&self.shape)
    }

    /// All axis-`d` offsets as one contiguous slice.
    pub fn channel(&self, d: usize) -> &[Real] {
        let n = self.num_voxels();
        &self.offsets[d * n..(d + 1) * n]
    }

    pub fn channel_mut(&mut self, d: usize) -> &mut [Real] {
        let n = self.num_voxels();
        &mut self.offsets[d * n..(d + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.offsets.iter().all(|v| v.is_finite())
    }

    /// Largest |offset| over all axes and voxels.
    pub fn max_abs_offset(&self) -> Real {
        self.offsets.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn scaled(&self, factor: Real) -> Self {
        DisplacementField {
            shape: self.shape.clone(),
            offsets: self.offsets.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::volume::save_field(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::volume::load_field(path)
    }
}

/// Field of all-zero offsets: warping with it reproduces the input.
pub fn identity_field(shape: &[usize]) -> DisplacementField {
    assert!(shape.iter().all(|&d| d > 0), "dims must be positive");
    DisplacementField::zeros(shape)
}

fn check_same_shape(context: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape_mismatch(context, a, b));
    }
    Ok(())
}

/// Per-axis interpolation state for one output voxel.
#[derive(Clone, Copy, Default)]
struct AxisSample {
    /// Lower neighbor index (already in range).
    i0: usize,
    /// Upper neighbor, clamped to the last valid index.
    i1: usize,
    /// Weight of the upper neighbor.
    frac: Real,
    /// False when the raw coordinate fell outside [0, dim-1].
    in_range: bool,
}

fn axis_sample(raw: Real, dim: usize) -> AxisSample {
    let top = (dim - 1) as Real;
    let in_range = (0.0..=top).contains(&raw);
    let x = raw.clamp(0.0, top);
    let i0 = x.floor() as usize;
    let i1 = (i0 + 1).min(dim - 1);
    AxisSample {
        i0,
        i1,
        frac: x - i0 as Real,
        in_range,
    }
}

/// Pull-resample `m` at `p + u(p)` with n-linear interpolation.
pub fn sample_linear(m: &Volume, field: &DisplacementField) -> Result<Volume> {
    check_same_shape("sample_linear", &m.shape, &field.shape)?;
    let rank = m.rank();
    let n = m.len();
    let st = strides(&m.shape);
    let mut out = vec![0.0 as Real; n];

    let mut idx = vec![0usize; rank];
    let mut axes = [AxisSample::default(); 3];
    for (i, o) in out.iter_mut().enumerate() {
        for d in 0..rank {
            let raw = idx[d] as Real + field.offsets[d * n + i];
            axes[d] = axis_sample(raw, m.shape[d]);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << rank) {
            let mut w = 1.0;
            let mut lin = 0usize;
            for d in 0..rank {
                let a = &axes[d];
                if corner >> d & 1 == 1 {
                    w *= a.frac;
                    lin += a.i1 * st[d];
                } else {
                    w *= 1.0 - a.frac;
                    lin += a.i0 * st[d];
                }
            }
            acc += w * m.data[lin];
        }
        *o = acc;
        crate::next_index(&mut idx, &m.shape);
    }
    Ok(Volume {
        shape: m.shape.clone(),
        spacing: m.spacing.clone(),
        data: out,
    })
}

/// Pull-resample labels at the nearest voxel to `p + u(p)`; ties at .5 round
/// toward +∞.
pub fn sample_nearest(s: &SegmentationMap, field: &DisplacementField) -> Result<SegmentationMap> {
    check_same_shape("sample_nearest", &s.shape, &field.shape)?;
    let rank = s.shape.len();
    let n = s.labels.len();
    let st = strides(&s.shape);
    let mut out = vec![0i32; n];

    let mut idx = vec![0usize; rank];
    for (i, o) in out.iter_mut().enumerate() {
        let mut lin = 0usize;
        for d in 0..rank {
            let raw = idx[d] as Real + field.offsets[d * n + i];
            let x = raw.clamp(0.0, (s.shape[d] - 1) as Real);
            let q = (x + 0.5).floor() as usize;
            lin += q.min(s.shape[d] - 1) * st[d];
        }
        *o = s.labels[lin];
        crate::next_index(&mut idx, &s.shape);
    }
    Ok(SegmentationMap {
        shape: s.shape.clone(),
        labels: out,
    })
}

/// Gradient of `⟨upstream, sample_linear(m, field)⟩` with respect to the field.
///
/// The warped value at voxel `p` depends only on the offsets at `p`, so the
/// gradient is pointwise: upstream(p) times the derivative of the interpolant
/// along each axis. Axes whose raw coordinate was clamped contribute zero.
pub fn sample_linear_vjp(
    m: &Volume,
    field: &DisplacementField,
    upstream: &Volume,
) -> Result<DisplacementField> {
    check_same_shape("sample_linear_vjp", &m.shape, &field.shape)?;
    check_same_shape("sample_linear_vjp", &m.shape, &upstream.shape)?;
    let rank = m.rank();
    let n = m.len();
    let st = strides(&m.shape);
    let mut grad = vec![0.0 as Real; rank * n];

    let mut idx = vec![0usize; rank];
    let mut axes = [AxisSample::default(); 3];
    for i in 0..n {
        let up = upstream.data[i];
        for d in 0..rank {
            let raw = idx[d] as Real + field.offsets[d * n + i];
            axes[d] = axis_sample(raw, m.shape[d]);
        }
        if up != 0.0 {
            let mut dacc = [0.0 as Real; 3];
            for corner in 0..(1usize << rank) {
                let mut ws = [0.0 as Real; 3];
                let mut lin = 0usize;
                for d in 0..rank {
                    let a = &axes[d];
                    if corner >> d & 1 == 1 {
                        ws[d] = a.frac;
                        lin += a.i1 * st[d];
                    } else {
                        ws[d] = 1.0 - a.frac;
                        lin += a.i0 * st[d];
                    }
                }
                let v = m.data[lin];
                for d in 0..rank {
                    if !axes[d].in_range {
                        continue;
                    }
                    // d(weight)/d(offset_d): +1 on the upper neighbor, -1 on
                    // the lower, times the other axes' weights.
                    let sign = if corner >> d & 1 == 1 { 1.0 } else { -1.0 };
                    let mut others = 1.0;
                    // Only the first `rank` weights are live; the rest of the
                    // fixed-size buffer must not join the product.
                    for (e, &w) in ws.iter().take(rank).enumerate() {
                        if e != d {
                            others *= w;
                        }
                    }
                    dacc[d] += sign * others * v;
                }
            }
            for d in 0..rank {
                grad[d * n + i] = up * dacc[d];
            }
        }
        crate::next_index(&mut idx, &m.shape);
    }
    Ok(DisplacementField {
        shape: m.shape.clone(),
        offsets: grad,
    })
}
