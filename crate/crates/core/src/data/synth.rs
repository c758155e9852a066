//! Seeded synthetic scenes with known masks, used as test fixtures.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_mask, write_rgb, DatasetManifest, SampleRecord, SegmentationMask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: Tensor<f32>,
    pub mask: SegmentationMask,
}

const BASE_COLORS: [[f32; 3]; 8] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.85, 0.20],
    [0.75, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.50, 0.50, 0.50],
];

/// Mean color of class `c` in synthetic scenes.
pub fn class_color(c: usize) -> [f32; 3] {
    let base = BASE_COLORS[c % BASE_COLORS.len()];
    let shade = 1.0 - 0.15 * (c / BASE_COLORS.len()) as f32;
    base.map(|v| v * shade)
}

fn render(mask: &SegmentationMask, rng: &mut ChaCha8Rng, noise: f32) -> Tensor<f32> {
    let (h, w) = (mask.height, mask.width);
    let mut data = vec![0.0f32; 3 * h * w];
    for (p, &cls) in mask.indices.iter().enumerate() {
        let col = if cls == super::UNLABELED { [0.05; 3] } else { class_color(cls as usize) };
        for c in 0..3 {
            let jitter = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
            data[c * h * w + p] = (col[c] + jitter).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], data).expect("sized buffer")
}

/// A `size×size` scene tiled by `block×block` squares, each one of `classes`
/// classes; every class appears at least once when there are enough blocks.
pub fn block_scene(size: usize, block: usize, classes: usize, seed: u64) -> Result<SynthSample> {
    if classes == 0 || classes > 254 || block == 0 || size % block != 0 {
        return Err(Error::Usage(format!("invalid block scene: size {size}, block {block}, classes {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = size / block;
    let mut labels: Vec<u8> = (0..g * g).map(|i| (i % classes) as u8).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let mut mask = SegmentationMask::filled(size, size, 0);
    for r in 0..size {
        for c in 0..size {
            mask.indices[r * size + c] = labels[(r / block) * g + c / block];
        }
    }
    let image = render(&mask, &mut rng, 0.03);
    Ok(SynthSample { image, mask })
}

/// Class 0 backdrop overlaid with random axis-aligned rectangles and discs of
/// the other classes. With `unlabeled` set, one extra rectangle is marked
/// with the sentinel.
pub fn shape_scene(height: usize, width: usize, classes: usize, seed: u64, unlabeled: bool) -> Result<SynthSample> {
    if classes == 0 || classes > 254 || height < 4 || width < 4 {
        return Err(Error::Usage(format!("invalid shape scene: {height}x{width}, {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = SegmentationMask::filled(height, width, 0);
    let shapes = 2 + classes;
    for k in 0..shapes + unlabeled as usize {
        let cls = match (k == shapes, classes) {
            (true, _) => super::UNLABELED,
            (false, 1) => 0,
            (false, _) => (1 + k % (classes - 1)) as u8,
        };
        let (r0, c0) = (rng.random_range(0..height), rng.random_range(0..width));
        let (rh, rw) = (rng.random_range(2..=height / 2), rng.random_range(2..=width / 2));
        let disc = rng.random_bool(0.4) && k != shapes;
        for r in r0..(r0 + rh).min(height) {
            for c in c0..(c0 + rw).min(width) {
                let inside = !disc || {
                    let (dy, dx) = ((r - r0) as f64 / rh as f64 - 0.5, (c - c0) as f64 / rw as f64 - 0.5);
                    dy * dy + dx * dx <= 0.25
                };
                if inside {
                    mask.indices[r * width + c] = cls;
                }
            }
        }
    }
    let image = render(&mask, &mut rng, 0.05);
    Ok(SynthSample { image, mask })
}

/// Writes `count` shape scenes under `dir` (`images/`, `masks/`,
/// `manifest.json`) and returns the manifest.
pub fn write_corpus(dir: &Path, name: &str, classes: &[String], count: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let s = shape_scene(size, size, classes.len(), seed.wrapping_add(i as u64), i % 2 == 1)?;
        let image = format!("images/{i:04}.png");
        let mask = format!("masks/{i:04}.png");
        write_rgb(&dir.join(&image), &s.image)?;
        write_mask(&dir.join(&mask), &s.mask)?;
        samples.push(SampleRecord { image: image.into(), mask: mask.into(), source: name.to_string() });
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        classes: classes.to_vec(),
        samples,
        remap: Default::default(),
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
