//! Unsupervised learnable deformable registration for 2D and 3D volumes.
//!
//! A convolutional encoder-decoder maps a (fixed, moving) volume pair to a dense
//! displacement field. Training minimizes a local cross-correlation similarity
//! plus a diffusion smoothness penalty through a differentiable warp layer, so
//! no ground-truth correspondences are needed. A classic per-pair variational
//! optimizer on the same energy serves as the non-learning baseline, and
//! Dice overlap of warped segmentations is the evaluation metric.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`volume`] — volume/segmentation containers and file I/O (native + NIfTI-1)
//! - [`synth`] — synthetic phantoms with known smooth ground-truth warps
//! - [`dataset`] — manifests binding pair files on disk into datasets
//! - [`warp`] — differentiable n-linear resampling of volumes and labels
//! - [`loss`] — local cross-correlation + diffusion regularizer with exact gradients
//! - [`ops`] — convolution / activation / resampling primitives with backward passes
//! - [`net`] — the encoder-decoder registration network
//! - [`train`] — Adam training loop, model selection, lambda sweeps
//! - [`varopt`] — coarse-to-fine variational optimization of a single pair
//! - [`eval`] — Dice reports, smoothness statistics, runtime benchmarks
//! - [`cli`] — the `morphflow` command-line front end
//!
//! The runnable programs under `examples/` walk through each capability; see the
//! README for the full tour.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod loss;
pub mod net;
pub mod ops;
pub mod rng;
pub mod synth;
pub mod train;
pub mod varopt;
pub mod volume;
pub mod warp;

/// Working scalar type. `f64` by default; the `f32` feature switches storage
/// and arithmetic to single precision for faster training builds. File formats
/// are fixed at f32/i32 regardless of this choice.
#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

pub use error::{Error, Result};
pub use loss::LossConfig;
pub use net::{ArchConfig, NetworkParams};
pub use train::TrainConfig;
pub use varopt::VarOptConfig;
pub use volume::{SegmentationMap, Volume};
pub use warp::DisplacementField;

/// Number of voxels implied by a shape (product of its extents).
pub fn num_voxels(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a slowest-first shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Visit every 1-D lane of a row-major array along `axis`, calling
/// `visit(base, stride)` once per lane; element `k` of the lane lives at
/// `base + k * stride`. Used by the separable filters in [`loss`] and [`synth`].
pub(crate) fn for_each_lane(shape: &[usize], axis: usize, mut visit: impl FnMut(usize, usize)) {
    let st = strides(shape);
    let len = shape[axis];
    let stride = st[axis];
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        let block = o * len * stride;
        for i in 0..stride {
            visit(block + i, stride);
        }
    }
}

/// Advance a multi-index in row-major order. Returns false after the last index.
pub(crate) fn next_index(idx: &mut [usize], shape: &[usize]) -> bool {
    for d in (0..shape.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return true;
        }
        idx[d] = 0;
    }
    false
}
