use std::path::Path;

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};

use super::SegmentationMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// 8-bit RGB PNG to `[3, H, W]` with values in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes `[3, H, W]` (values clamped to `[0, 1]`) as 8-bit RGB PNG.
pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("write_rgb", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (image.data()[c * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Single-channel 8-bit PNG; other color types are rejected rather than converted.
pub fn read_mask(path: &Path) -> Result<SegmentationMask> {
    let img = open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Usage(format!(
                "{}: mask must be 8-bit grayscale, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    SegmentationMask::new(gray.height() as usize, gray.width() as usize, gray.into_raw())
}

pub fn write_mask(path: &Path, mask: &SegmentationMask) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_raw(mask.width as u32, mask.height as u32, mask.indices.clone())
        .ok_or_else(|| Error::shape("write_mask", "buffer size mismatch"))?;
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
