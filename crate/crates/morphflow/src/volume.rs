//! Scalar volumes, segmentation maps, and their on-disk formats.
//!
//! Axis order is canonical slowest-to-fastest throughout: `(z, y, x)` for 3D,
//! `(y, x)` for 2D. The native format is a raw little-endian f32 payload
//! (`.vol`, or `.seg` with i32 labels) plus a JSON sidecar `<file>.json`
//! carrying `shape`, `spacing`, and `kind`. NIfTI-1 reading covers
//! uncompressed little-endian files with datatypes uint8/int16/float32;
//! orientation matrices are ignored — inputs are assumed pre-aligned.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{num_voxels, Real};

/// n-D scalar intensity grid, `n` in {1, 2, 3}.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: Vec<usize>,
    /// Physical units per voxel, informational only.
    pub spacing: Vec<Real>,
    /// One scalar per voxel, canonical slowest-first layout.
    pub data: Vec<Real>,
}

/// Integer-labeled grid aligned to a companion [`Volume`]. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub shape: Vec<usize>,
    pub labels: Vec<i32>,
}

/// Supported input formats for [`load_volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Native,
    Nifti1,
}

impl Volume {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Self {
        assert_eq!(num_voxels(&shape), data.len(), "data length must match shape");
        let spacing = vec![1.0; shape.len()];
        Volume { shape, spacing, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Volume::new(shape.to_vec(), vec![0.0; num_voxels(shape)])
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl SegmentationMap {
    pub fn new(shape: Vec<usize>, labels: Vec<i32>) -> Self {
        assert_eq!(num_voxels(&shape), labels.len(), "label count must match shape");
        SegmentationMap { shape, labels }
    }

    /// Distinct labels present, ascending, background 0 included if present.
    pub fn label_set(&self) -> Vec<i32> {
        let mut set: Vec<i32> = self.labels.to_vec();
        set.sort_unstable();
        set.dedup();
        set
    }

    /// Voxel count of one label.
    pub fn label_volume(&self, label: i32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    kind: String,
}

fn sidecar_path(data_path: &Path) -> PathBuf {
    let mut s = data_path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn read_sidecar(data_path: &Path, expect_kind: &str) -> Result<Sidecar> {
    let path = sidecar_path(data_path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if sc.kind != expect_kind {
        return Err(Error::MalformedHeader {
            path,
            reason: format!("kind is {:?}, expected {:?}", sc.kind, expect_kind),
        });
    }
    if sc.shape.is_empty() || sc.shape.contains(&0) {
        return Err(Error::MalformedHeader {
            path,
            reason: format!("invalid shape {:?}", sc.shape),
        });
    }
    Ok(sc)
}

// The widening is real under the `f32` feature, where `Real` is `f32`.
#[allow(clippy::useless_conversion)]
fn write_sidecar(data_path: &Path, shape: &[usize], spacing: &[Real], kind: &str) -> Result<()> {
    let sc = Sidecar {
        shape: shape.to_vec(),
        spacing: spacing.iter().map(|&s| s.into()).collect(),
        kind: kind.to_string(),
    };
    let path = sidecar_path(data_path);
    let text = serde_json::to_string_pretty(&sc).expect("sidecar serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_f32_payload(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn read_f32_payload(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Load an intensity volume. The format is explicit, not sniffed.
pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    let v = match format {
        VolumeFormat::Native => load_native_volume(path)?,
        VolumeFormat::Nifti1 => load_nifti1(path)?,
    };
    if !v.is_finite() {
        return Err(Error::NonFiniteData {
            path: path.to_path_buf(),
        });
    }
    Ok(v)
}

fn load_native_volume(path: &Path) -> Result<Volume> {
    let sc = read_sidecar(path, "intensity")?;
    let data = read_f32_payload(path, num_voxels(&sc.shape))?;
    Ok(Volume {
        shape: sc.shape,
        spacing: sc.spacing.iter().map(|&s| s as Real).collect(),
        data: data.into_iter().map(|v| v as Real).collect(),
    })
}

/// Write an intensity volume in the native format (`<path>` + `<path>.json`).
// The narrowing is a no-op under the `f32` feature, where `Real` is `f32`.
#[allow(clippy::unnecessary_cast)]
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    write_f32_payload(path, v.data.iter().map(|&x| x as f32))?;
    write_sidecar(path, &v.shape, &v.spacing, "intensity")
}

/// Load a segmentation map (raw i32 payload, sidecar kind "labels").
pub fn load_segmentation(path: &Path) -> Result<SegmentationMap> {
    let sc = read_sidecar(path, "labels")?;
    let expected = num_voxels(&sc.shape);
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() / 4,
        });
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(SegmentationMap {
        shape: sc.shape,
        labels,
    })
}

pub fn save_segmentation(s: &SegmentationMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(s.labels.len() * 4);
    for &l in &s.labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let spacing = vec![1.0 as Real; s.shape.len()];
    write_sidecar(path, &s.shape, &spacing, "labels")
}

/// Displacement-field I/O lives here so all sidecar handling stays in one place.
/// The payload is the n-channel volume with channels as the slowest axis; the
/// sidecar shape is `[channels, spatial...]` and kind is "field".
#[allow(clippy::unnecessary_cast)] // no-op narrowing under the `f32` feature
pub fn save_field(field: &crate::warp::DisplacementField, path: &Path) -> Result<()> {
    let mut full_shape = vec![field.rank()];
    full_shape.extend_from_slice(&field.shape);
    write_f32_payload(path, field.offsets.iter().map(|&x| x as f32))?;
    let spacing = vec![1.0 as Real; field.shape.len()];
    write_sidecar(path, &full_shape, &spacing, "field")
}

pub fn load_field(path: &Path) -> Result<crate::warp::DisplacementField> {
    let sc = read_sidecar(path, "field")?;
    if sc.shape.len() < 2 {
        return Err(Error::MalformedHeader {
            path: sidecar_path(path),
            reason: "field shape needs a channel axis plus spatial axes".into(),
        });
    }
    let channels = sc.shape[0];
    let spatial: Vec<usize> = sc.shape[1..].to_vec();
    if channels != spatial.len() {
        return Err(Error::MalformedHeader {
            path: sidecar_path(path),
            reason: format!(
                "field has {} channels for {} spatial axes",
                channels,
                spatial.len()
            ),
        });
    }
    let data = read_f32_payload(path, channels * num_voxels(&spatial))?;
    Ok(crate::warp::DisplacementField {
        shape: spatial,
        offsets: data.into_iter().map(|v| v as Real).collect(),
    })
}

// NIfTI-1 header offsets actually honored: dim (40), datatype (70),
// bitpix (72), vox_offset (108), magic (344).
const NIFTI_HEADER_LEN: usize = 348;

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn load_nifti1(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("file holds {} bytes, header needs 348", bytes.len()),
        });
    }
    let sizeof_hdr = le_i32(&bytes, 0);
    if sizeof_hdr != 348 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("sizeof_hdr is {sizeof_hdr}, expected 348 (little-endian)"),
        });
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("unrecognized magic {magic:?}"),
        });
    }

    let ndim = le_i16(&bytes, 40);
    if !(1..=3).contains(&ndim) {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("dim[0] = {ndim}, only 1..=3 spatial dims supported"),
        });
    }
    // dim[1] is the fastest axis (x); canonical order is slowest-first.
    let mut shape = Vec::with_capacity(ndim as usize);
    for d in (1..=ndim).rev() {
        let extent = le_i16(&bytes, 40 + 2 * d as usize);
        if extent <= 0 {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("dim[{d}] = {extent}"),
            });
        }
        shape.push(extent as usize);
    }
    let mut spacing = Vec::with_capacity(ndim as usize);
    for d in (1..=ndim).rev() {
        let pixdim = le_f32(&bytes, 76 + 4 * d as usize);
        spacing.push(if pixdim > 0.0 { pixdim as Real } else { 1.0 });
    }

    let datatype = le_i16(&bytes, 70);
    let bitpix = le_i16(&bytes, 72);
    let bytes_per = match (datatype, bitpix) {
        (2, 8) => 1usize,   // uint8
        (4, 16) => 2usize,  // int16
        (16, 32) => 4usize, // float32
        _ => {
            return Err(Error::UnsupportedElementType {
                path: path.to_path_buf(),
                datatype: format!("datatype={datatype} bitpix={bitpix}"),
            })
        }
    };

    let vox_offset = le_f32(&bytes, 108);
    if vox_offset < 0.0 || vox_offset.fract() != 0.0 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("vox_offset {vox_offset} is not a non-negative integer"),
        });
    }
    let offset = vox_offset as usize;
    let n = num_voxels(&shape);
    let payload = bytes.len().saturating_sub(offset);
    if offset < NIFTI_HEADER_LEN || payload < n * bytes_per {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            expected: n,
            actual: payload / bytes_per,
        });
    }

    let raw = &bytes[offset..offset + n * bytes_per];
    let data: Vec<Real> = match datatype {
        2 => raw.iter().map(|&b| b as Real).collect(),
        4 => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as Real)
            .collect(),
        16 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
            .collect(),
        _ => unreachable!(),
    };

    Ok(Volume { shape, spacing, data })
}

/// Affinely map intensities to [0, 1]. A constant volume maps to all zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let mut lo = Real::INFINITY;
    let mut hi = Real::NEG_INFINITY;
    for &x in &v.data {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data.iter().map(|&x| (x - lo) / range).collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Volume {
        shape: v.shape.clone(),
        spacing: v.spacing.clone(),
        data,
    }
}

/// Center-crop or zero-pad to a target shape. On odd differences the extra
/// voxel goes to the high side of the axis.
pub fn crop_or_pad(v: &Volume, target_shape: &[usize]) -> Volume {
    assert_eq!(v.rank(), target_shape.len(), "rank must match");
    assert!(target_shape.iter().all(|&d| d > 0), "target dims positive");

    // Per axis: source start when cropping, destination start when padding.
    let rank = v.rank();
    let mut src_start = vec![0usize; rank];
    let mut dst_start = vec![0usize; rank];
    let mut copy_len = vec![0usize; rank];
    for d in 0..rank {
        if v.shape[d] >= target_shape[d] {
            src_start[d] = (v.shape[d] - target_shape[d]) / 2;
            copy_len[d] = target_shape[d];
        } else {
            dst_start[d] = (target_shape[d] - v.shape[d]) / 2;
            copy_len[d] = v.shape[d];
        }
    }

    let src_strides = crate::strides(&v.shape);
    let dst_strides = crate::strides(target_shape);
    let mut out = vec![0.0 as Real; num_voxels(target_shape)];

    let mut idx = vec![0usize; rank];
    loop {
        let mut s = 0usize;
        let mut t = 0usize;
        for d in 0..rank {
            s += (src_start[d] + idx[d]) * src_strides[d];
            t += (dst_start[d] + idx[d]) * dst_strides[d];
        }
        out[t] = v.data[s];
        if !crate::next_index(&mut idx, &copy_len) {
            break;
        }
    }

    Volume {
        shape: target_shape.to_vec(),
        spacing: v.spacing.clone(),
        data: out,
    }
}
