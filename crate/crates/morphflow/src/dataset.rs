//! Dataset manifests: JSON listings of registration pairs stored on disk.
//!
//! A manifest is a bare JSON array of entries, each naming the five files that
//! make up one pair (fixed, moving, both segmentations, and the generator
//! field used to synthesize the pair). Paths are interpreted relative to the
//! manifest's own directory, so a dataset directory can be moved or copied
//! wholesale. [`Dataset`] binds a manifest to that directory and loads pairs
//! on demand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    load_segmentation, load_volume, SegmentationMap, Volume, VolumeFormat,
};
use crate::warp::DisplacementField;

/// One registration pair in a manifest. Paths are relative to the manifest's
/// directory; absolute paths are honored as given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub fixed: String,
    pub moving: String,
    pub seg_fixed: String,
    pub seg_moving: String,
    pub gt_field: String,
}

/// An ordered list of registration pairs. Serializes as a bare JSON array so
/// manifests stay readable and tool-friendly.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<PairEntry>,
}

impl DatasetManifest {
    /// Write the manifest as pretty-printed JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Dataset(format!("manifest serialization failed: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Read a manifest from JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Partition the entries into consecutive chunks of the given sizes
    /// (e.g. `[40, 10, 10]` for train/val/test). The sizes must sum to
    /// exactly the number of entries.
    pub fn split(&self, counts: &[usize]) -> Result<Vec<DatasetManifest>> {
        let total: usize = counts.iter().sum();
        if total != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "split sizes sum to {total} but the manifest has {} entries",
                self.entries.len()
            )));
        }
        let mut out = Vec::with_capacity(counts.len());
        let mut at = 0;
        for &n in counts {
            out.push(DatasetManifest {
                entries: self.entries[at..at + n].to_vec(),
            });
            at += n;
        }
        Ok(out)
    }
}

/// A fully loaded registration pair.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub seg_fixed: SegmentationMap,
    pub seg_moving: SegmentationMap,
    pub gt_field: DisplacementField,
}

/// A manifest bound to the directory it was loaded from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Open a manifest file; pair paths will resolve against its directory.
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let dir = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Dataset { dir, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    /// Resolve a manifest-relative path against the dataset directory.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    /// Load pair `i` from disk and check that all five files agree on shape.
    pub fn load_pair(&self, i: usize) -> Result<LoadedPair> {
        let e = self.manifest.entries.get(i).ok_or_else(|| {
            Error::Dataset(format!(
                "pair index {i} out of range for manifest with {} entries",
                self.len()
            ))
        })?;
        let fixed = load_volume(&self.resolve(&e.fixed), VolumeFormat::Native)?;
        let moving = load_volume(&self.resolve(&e.moving), VolumeFormat::Native)?;
        let seg_fixed = load_segmentation(&self.resolve(&e.seg_fixed))?;
        let seg_moving = load_segmentation(&self.resolve(&e.seg_moving))?;
        let gt_field = DisplacementField::load(&self.resolve(&e.gt_field))?;
        for (name, shape) in [
            ("moving", &moving.shape),
            ("seg_fixed", &seg_fixed.shape),
            ("seg_moving", &seg_moving.shape),
            ("gt_field", &gt_field.shape),
        ] {
            if *shape != fixed.shape {
                return Err(Error::shape_mismatch(
                    &format!("pair {i}: {name} shape differs from fixed"),
                    shape,
                    &fixed.shape,
                ));
            }
        }
        Ok(LoadedPair {
            fixed,
            moving,
            seg_fixed,
            seg_moving,
            gt_field,
        })
    }

    /// Load every pair in manifest order.
    pub fn load_all(&self) -> Result<Vec<LoadedPair>> {
        (0..self.len()).map(|i| self.load_pair(i)).collect()
    }
}
