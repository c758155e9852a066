//! Dataset manifests, vocabulary harmonization across sources, mask I/O,
//! attribute statistics, and a synthetic corpus generator.

mod io;
mod merge;
mod stats;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_mask, read_rgb, write_mask, write_rgb};
pub use merge::{merge_datasets, normalize_class_name, MergeOptions, DEFAULT_BACKGROUND_SYNONYMS};
pub use stats::{compute_stats, connected_components, size_bucket, Centroid, Segment, SegmentStats, SkippedSample};

/// Mask value for pixels that carry no class.
pub const UNLABELED: u8 = 255;

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, indices: Vec<u8>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::shape("mask", format!("{} values for {height}x{width}", indices.len())));
        }
        Ok(SegmentationMask { height, width, indices })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        SegmentationMask { height, width, indices: vec![value; height * width] }
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.indices[row * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub source: String,
}

/// Source value to manifest class index (or [`UNLABELED`]).
pub type RemapTable = BTreeMap<u8, u8>;

/// A dataset description. Relative sample paths resolve against the
/// directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
    /// Per-source tables applied to mask values on load. Sources without a
    /// table use their values as class indices directly.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub remap: BTreeMap<String, RemapTable>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        let abs = path.canonicalize().map_err(|e| Error::io(path, e))?;
        m.root = abs.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Table mapping raw mask values of `source` to this manifest's indices.
    pub fn table_for(&self, source: &str) -> RemapTable {
        self.remap.get(source).cloned().unwrap_or_else(|| identity_table(self.classes.len()))
    }

    /// Reads a sample's mask and maps it into this manifest's class indices.
    pub fn load_mask(&self, sample: &SampleRecord) -> Result<SegmentationMask> {
        let raw = read_mask(&self.resolve(&sample.mask))?;
        remap_mask(&raw, &self.table_for(&sample.source))
    }

    pub fn load_image(&self, sample: &SampleRecord) -> Result<crate::tensor::Tensor<f32>> {
        read_rgb(&self.resolve(&sample.image))
    }
}

/// `i -> i` for every class plus the sentinel.
pub fn identity_table(classes: usize) -> RemapTable {
    (0..classes.min(255)).map(|i| (i as u8, i as u8)).chain([(UNLABELED, UNLABELED)]).collect()
}

/// Substitutes every pixel through `table`.
pub fn remap_mask(mask: &SegmentationMask, table: &RemapTable) -> Result<SegmentationMask> {
    let mut lut = [None; 256];
    for (&k, &v) in table {
        lut[k as usize] = Some(v);
    }
    let indices = mask
        .indices
        .iter()
        .map(|&v| lut[v as usize].ok_or(Error::UncoveredValue(v)))
        .collect::<Result<Vec<u8>>>()?;
    Ok(SegmentationMask { indices, ..*mask })
}
