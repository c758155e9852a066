use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, SegmentationMask, UNLABELED};
use crate::error::Result;

/// One 4-connected region of a single class.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub size: u64,
    /// Mean pixel-center position divided by the extent, `(row, col)` in `[0, 1]`.
    pub centroid: (f64, f64),
}

/// 4-connected components of the pixels equal to `class`, ordered by their
/// first pixel in row-major scan order.
pub fn connected_components(mask: &SegmentationMask, class: u8) -> Vec<Segment> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || mask.indices[start] != class {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut n, mut sr, mut sc) = (0u64, 0u64, 0u64);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            n += 1;
            sr += r as u64;
            sc += c as u64;
            let mut visit = |q: usize| {
                if !seen[q] && mask.indices[q] == class {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        let nf = n as f64;
        out.push(Segment {
            size: n,
            centroid: ((sr as f64 / nf + 0.5) / h as f64, (sc as f64 / nf + 0.5) / w as f64),
        });
    }
    out
}

/// Lower bound of the power-of-two bucket holding `size` (`size >= 1`).
pub fn size_bucket(size: u64) -> u64 {
    1u64 << (63 - size.max(1).leading_zeros())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub sample: usize,
    pub class: String,
    pub size: u64,
    pub row: f64,
    pub col: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub mask: PathBuf,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub class_pixel_counts: BTreeMap<String, u64>,
    /// Share of labeled pixels per class; sums to 1 when any pixel is labeled.
    pub normalized_class_pixel_counts: BTreeMap<String, f64>,
    /// Segment count per power-of-two size bucket (key = bucket lower bound).
    pub segment_size_histogram: BTreeMap<u64, u64>,
    pub normalized_centroids: Vec<Centroid>,
    pub samples_read: usize,
    pub skipped: Vec<SkippedSample>,
}

struct PerSample {
    counts: Vec<u64>,
    segments: Vec<(u8, Segment)>,
}

fn per_sample(mask: &SegmentationMask, classes: usize) -> PerSample {
    let mut counts = vec![0u64; classes];
    for &v in &mask.indices {
        if v != UNLABELED && (v as usize) < classes {
            counts[v as usize] += 1;
        }
    }
    let mut segments = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            segments.extend(connected_components(mask, c as u8).into_iter().map(|s| (c as u8, s)));
        }
    }
    PerSample { counts, segments }
}

/// Pixel shares, segment-size histogram, and segment centroids over every
/// readable sample. Masks are mapped through the manifest's remap tables;
/// unreadable samples are listed in `skipped`.
pub fn compute_stats(manifest: &DatasetManifest) -> SegmentStats {
    let k = manifest.classes.len();
    let results: Vec<Result<PerSample>> = manifest
        .samples
        .par_iter()
        .map(|s| manifest.load_mask(s).map(|m| per_sample(&m, k)))
        .collect();

    let mut stats = SegmentStats::default();
    let mut totals = vec![0u64; k];
    for (i, (res, rec)) in results.into_iter().zip(&manifest.samples).enumerate() {
        match res {
            Ok(ps) => {
                stats.samples_read += 1;
                for (t, c) in totals.iter_mut().zip(&ps.counts) {
                    *t += c;
                }
                for (c, seg) in ps.segments {
                    *stats.segment_size_histogram.entry(size_bucket(seg.size)).or_default() += 1;
                    stats.normalized_centroids.push(Centroid {
                        sample: i,
                        class: manifest.classes[c as usize].clone(),
                        size: seg.size,
                        row: seg.centroid.0,
                        col: seg.centroid.1,
                    });
                }
            }
            Err(e) => stats.skipped.push(SkippedSample { mask: rec.mask.clone(), error: e.to_string() }),
        }
    }
    let labeled: u64 = totals.iter().sum();
    for (name, &n) in manifest.classes.iter().zip(&totals) {
        stats.class_pixel_counts.insert(name.clone(), n);
        let frac = if labeled == 0 { 0.0 } else { n as f64 / labeled as f64 };
        stats.normalized_class_pixel_counts.insert(name.clone(), frac);
    }
    stats
}
