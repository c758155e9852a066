//! 2-D convolution and stride-matched transposed convolution over NCHW data.

use rayon::prelude::*;

use super::ops::{gemm, MatRef, PAR_THRESHOLD};
use super::{expect_rank, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv2d_geometry<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    expect_rank("conv2d", x, 4)?;
    expect_rank("conv2d", w, 4)?;
    let [batch, c_in, h, wd] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let [c_out, wc_in, kh, kw] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
    if wc_in != c_in {
        return Err(Error::shape("conv2d", format!("input channels {c_in} but weight expects {wc_in}")));
    }
    if kh != kw {
        return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if b.shape != [c_out] {
        return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} output channels", b.shape)));
    }
    let out_h = conv_out_extent(h, kh, stride, padding);
    let out_w = conv_out_extent(wd, kh, stride, padding);
    match (out_h, out_w) {
        (Some(out_h), Some(out_w)) => Ok(ConvGeometry {
            batch,
            c_in,
            c_out,
            h,
            w: wd,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        }),
        _ => Err(Error::shape(
            "conv2d",
            format!("spatial {h}x{wd} too small for kernel {kh}, stride {stride}, padding {padding}"),
        )),
    }
}

/// Input coordinate feeding output `o` through kernel tap `k`, if inside the image.
#[inline]
fn tap(o: usize, k: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + k).checked_sub(padding)?;
    (pos < extent).then_some(pos)
}

/// Unfolds one image `[c_in, h, w]` into `[c_in·k·k, out_h·out_w]` columns.
fn im2col<T: Element>(src: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    for ci in 0..g.c_in {
        let img = &src[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..g.out_h {
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    match tap(oy, ky, g.stride, g.padding, g.h) {
                        None => dst.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = tap(ox, kx, g.stride, g.padding, g.w).map_or(T::zero(), |ix| img[iy * g.w + ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[c_in, h, w]`.
fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    for ci in 0..g.c_in {
        let img = &mut dst[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..g.out_h {
                    let Some(iy) = tap(oy, ky, g.stride, g.padding, g.h) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(ix) = tap(ox, kx, g.stride, g.padding, g.w) {
                            img[iy * g.w + ix] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation over NCHW input with a `[c_out, c_in, k, k]` weight,
/// computed as an unfold followed by a matrix product per batch element.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geometry(x, w, b, stride, padding)?;
    let plane = g.out_h * g.out_w;
    let ckk = g.c_in * g.kernel * g.kernel;
    let mut out = Tensor::zeros(&[g.batch, g.c_out, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); ckk * plane];
    for n in 0..g.batch {
        im2col(&x.data[n * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w], &g, &mut cols);
        let dst = &mut out.data[n * g.c_out * plane..][..g.c_out * plane];
        for (co, row) in dst.chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data[co]);
        }
        gemm(MatRef::row_major(&w.data, ckk), MatRef::row_major(&cols, plane), dst, ckk, plane, true);
    }
    Ok(out)
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_vjp<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let g = conv2d_geometry(x, w, &Tensor::zeros(&[w.shape[0]]), stride, padding).expect("validated in forward");
    let plane = g.out_h * g.out_w;
    let in_size = g.c_in * g.h * g.w;
    let ckk = g.c_in * g.kernel * g.kernel;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[g.c_out]);
    let mut cols = vec![T::zero(); ckk * plane];
    for n in 0..g.batch {
        let gy = &dy.data[n * g.c_out * plane..][..g.c_out * plane];
        im2col(&x.data[n * in_size..][..in_size], &g, &mut cols);
        // dw += dy · colsᵀ
        gemm(MatRef::row_major(gy, plane), MatRef::transposed(&cols, plane), &mut dw.data, plane, ckk, true);
        // dcols = wᵀ · dy
        gemm(MatRef::transposed(&w.data, ckk), MatRef::row_major(gy, plane), &mut cols, g.c_out, plane, false);
        col2im(&cols, &g, &mut dx.data[n * in_size..][..in_size]);
        for co in 0..g.c_out {
            db.data[co] += gy[co * plane..(co + 1) * plane].iter().copied().sum();
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with `stride == kernel` and no padding, so every
/// input pixel scatters into its own disjoint `k×k` output block.
///
/// Weight layout is `[c_in, c_out, k, k]`.
pub fn deconv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    kernel: usize,
) -> Result<Tensor<T>> {
    let (batch, c_in, h, wd, c_out) = deconv_dims(x, w, b, stride, kernel)?;
    let k = kernel;
    let (oh, ow) = (h * k, wd * k);
    let mut out = Tensor::zeros(&[batch, c_out, oh, ow]);
    let kern = |(idx, dst): (usize, &mut [T])| {
        let (n, co) = (idx / c_out, idx % c_out);
        dst.iter_mut().for_each(|v| *v = b.data[co]);
        for ci in 0..c_in {
            let src = &x.data[(n * c_in + ci) * h * wd..][..h * wd];
            let wk = &w.data[(ci * c_out + co) * k * k..][..k * k];
            for iy in 0..h {
                for ix in 0..wd {
                    let v = src[iy * wd + ix];
                    for ky in 0..k {
                        let row = &mut dst[(iy * k + ky) * ow + ix * k..][..k];
                        for (d, &wv) in row.iter_mut().zip(&wk[ky * k..(ky + 1) * k]) {
                            *d += v * wv;
                        }
                    }
                }
            }
        }
    };
    if batch * c_out * c_in * oh * ow >= PAR_THRESHOLD {
        out.data.par_chunks_mut(oh * ow).enumerate().for_each(kern);
    } else {
        out.data.chunks_mut(oh * ow).enumerate().for_each(kern);
    }
    Ok(out)
}

fn deconv_dims<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    kernel: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    if stride != kernel || kernel == 0 {
        return Err(Error::Unsupported {
            op: "deconv2d",
            detail: format!("stride {stride} must equal kernel {kernel}"),
        });
    }
    expect_rank("deconv2d", x, 4)?;
    expect_rank("deconv2d", w, 4)?;
    let [batch, c_in, h, wd] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    if w.shape[0] != c_in || w.shape[2] != kernel || w.shape[3] != kernel {
        return Err(Error::shape(
            "deconv2d",
            format!("input {:?} incompatible with weight {:?} (kernel {kernel})", x.shape, w.shape),
        ));
    }
    let c_out = w.shape[1];
    if b.shape != [c_out] {
        return Err(Error::shape("deconv2d", format!("bias {:?} for {c_out} output channels", b.shape)));
    }
    Ok((batch, c_in, h, wd, c_out))
}

pub fn deconv2d_vjp<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    kernel: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (batch, c_in, h, wd, c_out) =
        deconv_dims(x, w, &Tensor::zeros(&[w.shape[1]]), kernel, kernel).expect("validated in forward");
    let k = kernel;
    let (oh, ow) = (h * k, wd * k);
    let work = batch * c_out * c_in * oh * ow;

    let mut dx = Tensor::zeros(x.shape());
    let dx_kernel = |(idx, dst): (usize, &mut [T])| {
        let (n, ci) = (idx / c_in, idx % c_in);
        for co in 0..c_out {
            let gy = &dy.data[(n * c_out + co) * oh * ow..][..oh * ow];
            let wk = &w.data[(ci * c_out + co) * k * k..][..k * k];
            for iy in 0..h {
                for ix in 0..wd {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += gy[(iy * k + ky) * ow + ix * k + kx] * wk[ky * k + kx];
                        }
                    }
                    dst[iy * wd + ix] += acc;
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dx.data.par_chunks_mut(h * wd).enumerate().for_each(dx_kernel);
    } else {
        dx.data.chunks_mut(h * wd).enumerate().for_each(dx_kernel);
    }

    let mut dw = Tensor::zeros(w.shape());
    let dw_kernel = |(idx, dst): (usize, &mut [T])| {
        let (ci, co) = (idx / c_out, idx % c_out);
        for n in 0..batch {
            let src = &x.data[(n * c_in + ci) * h * wd..][..h * wd];
            let gy = &dy.data[(n * c_out + co) * oh * ow..][..oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::zero();
                    for iy in 0..h {
                        for ix in 0..wd {
                            acc += src[iy * wd + ix] * gy[(iy * k + ky) * ow + ix * k + kx];
                        }
                    }
                    dst[ky * k + kx] += acc;
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dw.data.par_chunks_mut(k * k).enumerate().for_each(dw_kernel);
    } else {
        dw.data.chunks_mut(k * k).enumerate().for_each(dw_kernel);
    }

    let mut db = Tensor::zeros(&[c_out]);
    for n in 0..batch {
        for co in 0..c_out {
            db.data[co] += dy.data[(n * c_out + co) * oh * ow..][..oh * ow].iter().copied().sum();
        }
    }
    (dx, dw, db)
}
