//! Overlapping-patch inference and label decoding.

use rayon::prelude::*;

use crate::data::SegmentationMask;
use crate::error::{Error, Result};
use crate::model::GsNet;
use crate::param::ParamStore;
use crate::tensor::{ops, resize, Tensor};

/// Square tiling of an `R×R` canvas by `P×P` patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPlan {
    pub resize_to: usize,
    pub patch: usize,
    pub stride: usize,
    /// `(row, col)` patch origins in row-major order.
    pub origins: Vec<(usize, usize)>,
}

impl PatchPlan {
    /// Origins `0, S, 2S, ..` per axis, with the last one moved to `R − P` so
    /// the far edge is covered.
    pub fn new(resize_to: usize, patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || stride == 0 || patch > resize_to {
            return Err(Error::Coverage(format!(
                "need 0 < patch <= canvas and stride > 0, got canvas {resize_to}, patch {patch}, stride {stride}"
            )));
        }
        let mut axis = vec![0];
        let mut o = 0;
        while o + patch < resize_to {
            o = (o + stride).min(resize_to - patch);
            axis.push(o);
        }
        let origins = axis.iter().flat_map(|&r| axis.iter().map(move |&c| (r, c))).collect();
        Self::with_origins(resize_to, patch, stride, origins)
    }

    /// A plan with explicit origins; rejected unless every canvas pixel is covered.
    pub fn with_origins(resize_to: usize, patch: usize, stride: usize, origins: Vec<(usize, usize)>) -> Result<Self> {
        let plan = PatchPlan { resize_to, patch, stride, origins };
        let counts = plan.coverage();
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Coverage(format!("pixel ({}, {}) is not covered", i / resize_to, i % resize_to)));
        }
        if plan.origins.iter().any(|&(r, c)| r + patch > resize_to || c + patch > resize_to) {
            return Err(Error::Coverage("a patch extends past the canvas".into()));
        }
        Ok(plan)
    }

    pub fn standard() -> Self {
        Self::new(640, 384, 256).expect("valid default plan")
    }

    /// Number of patches covering each canvas pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let r = self.resize_to;
        let mut counts = vec![0u32; r * r];
        for &(oy, ox) in &self.origins {
            for y in oy..(oy + self.patch).min(r) {
                for x in ox..(ox + self.patch).min(r) {
                    counts[y * r + x] += 1;
                }
            }
        }
        counts
    }
}

/// Anything mapping an image `[3, h, w]` to logits `[h, w, N]`.
pub trait SegmentationModel: Sync {
    fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A trained network bound to a fixed query set.
pub struct Predictor<'a> {
    pub model: &'a GsNet,
    pub store: &'a ParamStore<f32>,
    pub queries: Tensor<f32>,
}

impl SegmentationModel for Predictor<'_> {
    fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.model.infer(self.store, image, &self.queries)
    }
}

/// Resizes to the plan canvas, predicts every patch, averages overlapping
/// logits, and resizes the result back to the input extent. Patches run in
/// parallel; accumulation follows plan order.
pub fn patch_inference(image: &Tensor<f32>, model: &dyn SegmentationModel, plan: &PatchPlan) -> Result<Tensor<f32>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("patch_inference", format!("image must be [3, H, W], got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (r, p) = (plan.resize_to, plan.patch);
    let canvas = resize::bilinear_resize(image, r, r)?;
    let outputs: Vec<Tensor<f32>> = plan
        .origins
        .par_iter()
        .map(|&(oy, ox)| {
            let tile = ops::slice(&ops::slice(&canvas, 1, oy, p)?, 2, ox, p)?;
            model.logits(&tile)
        })
        .collect::<Result<_>>()?;

    let n = outputs.first().map(|t| t.shape()[2]).ok_or_else(|| Error::Coverage("plan has no patches".into()))?;
    let mut sum = vec![0.0f32; r * r * n];
    for (&(oy, ox), out) in plan.origins.iter().zip(&outputs) {
        if out.shape() != [p, p, n] {
            return Err(Error::shape("patch_inference", format!("patch logits {:?}, expected [{p}, {p}, {n}]", out.shape())));
        }
        for y in 0..p {
            let src = &out.data()[y * p * n..(y + 1) * p * n];
            let dst = &mut sum[((oy + y) * r + ox) * n..((oy + y) * r + ox + p) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    for (px, &c) in plan.coverage().iter().enumerate() {
        for v in &mut sum[px * n..(px + 1) * n] {
            *v /= c as f32;
        }
    }
    let merged = Tensor::new(vec![r, r, n], sum)?;
    if (h, w) == (r, r) {
        return Ok(merged);
    }
    let chw = ops::permute(&merged, &[2, 0, 1])?;
    let back = resize::bilinear_resize(&chw, h, w)?;
    ops::permute(&back, &[1, 2, 0])
}

/// Per-pixel argmax over the query axis of `logits [H, W, N]`; ties go to
/// the lowest index.
pub fn predict_labels(logits: &Tensor<f32>) -> Result<SegmentationMask> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::shape("predict_labels", format!("expected [H, W, N], got {s:?}")));
    }
    let n = s[2];
    if n >= 255 {
        return Err(Error::ClassIndex { index: n - 1, classes: 254 });
    }
    let indices = logits
        .data()
        .chunks(n)
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate().skip(1) {
                if v > px[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    SegmentationMask::new(s[0], s[1], indices)
}
