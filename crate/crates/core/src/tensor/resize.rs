//! Bilinear resampling over the last two axes (half-pixel centers, edge clamped).

use super::{cast, Element, Tensor};
use crate::error::{Error, Result};

/// Source taps `(i0, i1, frac)` for each output coordinate along one axis.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn planes<T>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let r = x.shape.len();
    if r < 2 {
        return Err(Error::shape("bilinear_resize", format!("needs rank >= 2, got {:?}", x.shape)));
    }
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    Ok((x.data.len() / (h * w), h, w))
}

pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (p, h, w) = planes(x)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", "zero output extent"));
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut shape = x.shape.clone();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    let mut out = Tensor::zeros(&shape);
    for (src, dst) in x.data.chunks(h * w).zip(out.data.chunks_mut(out_h * out_w)).take(p) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = cast::<T>(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = cast::<T>(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_vjp<T: Element>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (out_h, out_w) = (dy.shape[r - 2], dy.shape[r - 1]);
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut dx = Tensor::zeros(in_shape);
    for (gy, dst) in dy.data.chunks(out_h * out_w).zip(dx.data.chunks_mut(h * w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = cast::<T>(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = cast::<T>(fx);
                let g = gy[oy * out_w + ox];
                let (gt, gb) = (g * (T::one() - fy), g * fy);
                dst[y0 * w + x0] += gt * (T::one() - fx);
                dst[y0 * w + x1] += gt * fx;
                dst[y1 * w + x0] += gb * (T::one() - fx);
                dst[y1 * w + x1] += gb * fx;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize of a label grid (used for masks).
pub fn nearest_resize_labels(src: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = (((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        for ox in 0..out_w {
            let x = (((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
            out.push(src[y * w + x]);
        }
    }
    out
}
