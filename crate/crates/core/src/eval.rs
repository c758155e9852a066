//! Segmentation metrics, label-set similarity, and report rendering.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::data::{SegmentationMask, UNLABELED};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::QuerySet;

/// `counts[gt * n + pred]` over pixels whose ground truth is labeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(
                "accumulate",
                format!("prediction {}x{} vs ground truth {}x{}", pred.height, pred.width, gt.height, gt.width),
            ));
        }
        let n = self.classes;
        for (&p, &g) in pred.indices.iter().zip(&gt.indices) {
            if g == UNLABELED {
                continue;
            }
            for v in [g, p] {
                if v as usize >= n {
                    return Err(Error::ClassIndex { index: v as usize, classes: n });
                }
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merge", format!("{} vs {} classes", self.classes, other.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    pub miou: f64,
    /// `None` for excluded classes and classes with empty union.
    pub per_class: Vec<Option<f64>>,
}

/// Mean of `tp / (tp + fp + fn)` over classes not in `exclude` whose union is
/// nonzero.
pub fn miou(cm: &ConfusionMatrix, exclude: &BTreeSet<usize>) -> Result<MiouResult> {
    let n = cm.classes;
    let mut per_class = vec![None; n];
    let mut scored = Vec::new();
    for c in 0..n {
        if exclude.contains(&c) {
            continue;
        }
        let tp = cm.get(c, c);
        let gt_total: u64 = (0..n).map(|p| cm.get(c, p)).sum();
        let pred_total: u64 = (0..n).map(|g| cm.get(g, c)).sum();
        let union = gt_total + pred_total - tp;
        if union == 0 {
            continue;
        }
        let iou = tp as f64 / union as f64;
        per_class[c] = Some(iou);
        scored.push(iou);
    }
    if scored.is_empty() {
        return Err(Error::UndefinedMetric("no class with a nonzero union".into()));
    }
    Ok(MiouResult { miou: scored.iter().sum::<f64>() / scored.len() as f64, per_class })
}

fn unit_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .map(|r| {
            let norm = r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|&x| x as f64 / norm).collect()
        })
        .collect()
}

/// `1 − cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Symmetric Hausdorff distance between two embedding sets `[Na, D]`,
/// `[Nb, D]` under cosine distance of unit-normalized rows.
pub fn hausdorff(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("hausdorff", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ra, rb) = (unit_rows(a), unit_rows(b));
    // Equal rows are at distance exactly 0; the rounded self-dot can miss 1.
    let dist = |p: &Vec<f64>, q: &Vec<f64>| if p == q { 0.0 } else { cosine_distance(p, q) };
    let directed = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter().map(|p| y.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    // Round-off can give tiny negatives for identical rows.
    Ok(directed(&ra, &rb).max(directed(&rb, &ra)).max(0.0))
}

pub fn hausdorff_label_similarity(a: &QuerySet, b: &QuerySet) -> Result<f64> {
    hausdorff(&a.embeddings, &b.embeddings)
}

/// mIoU per dataset in insertion order, rendered with a trailing mean column.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub method: String,
    pub results: Vec<(String, f64)>,
}

impl Report {
    pub fn average(&self) -> f64 {
        if self.results.is_empty() {
            return 0.0;
        }
        self.results.iter().map(|r| r.1).sum::<f64>() / self.results.len() as f64
    }

    /// Aligned table with values in percent, two decimals.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Method".to_string()];
        header.extend(self.results.iter().map(|r| r.0.clone()));
        header.push("Avg.".into());
        let mut row = vec![self.method.clone()];
        row.extend(self.results.iter().map(|r| format!("{:.2}", r.1 * 100.0)));
        row.push(format!("{:.2}", self.average() * 100.0));
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, v)| h.len().max(v.len())).collect();
        let mut out = String::new();
        for line in [&header, &row] {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        out
    }

    /// `method,<datasets..>,Avg.` header and one row of fractions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for (name, _) in &self.results {
            write!(out, ",{name}").unwrap();
        }
        writeln!(out, ",Avg.").unwrap();
        out.push_str(&self.method);
        for (_, v) in &self.results {
            write!(out, ",{v:.6}").unwrap();
        }
        writeln!(out, ",{:.6}", self.average()).unwrap();
        out
    }
}

/// Overlay colors by class index, cycling past the end.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Grayscale copy of `image [3, H, W]` blended with the palette color of
/// each labeled pixel at weight `alpha`. Unlabeled pixels stay gray.
pub fn overlay(image: &Tensor<f32>, mask: &SegmentationMask, alpha: f32) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || (s[1], s[2]) != (mask.height, mask.width) {
        return Err(Error::shape("overlay", format!("image {s:?} vs mask {}x{}", mask.height, mask.width)));
    }
    let hw = s[1] * s[2];
    let d = image.data();
    let mut out = vec![0.0f32; 3 * hw];
    for (p, &cls) in mask.indices.iter().enumerate() {
        let gray = 0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p];
        for c in 0..3 {
            out[c * hw + p] = if cls == UNLABELED {
                gray
            } else {
                let col = PALETTE[cls as usize % PALETTE.len()][c] as f32 / 255.0;
                (1.0 - alpha) * gray + alpha * col
            };
        }
    }
    Tensor::new(s.to_vec(), out)
}
