//! Group normalization (NCHW) and layer normalization (last axis).

use super::{cast, expect_rank, Element, Tensor};
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-normalization-unit statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn moments<T: Element>(xs: &[T], eps: T) -> (T, T) {
    let n = cast::<T>(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Shared backward for a unit of `m` normalized values with affine scale
/// applied outside: given `dxhat`, returns `dx`.
fn norm_unit_vjp<T: Element>(xhat: &[T], dxhat: &[T], rstd: T, dx: &mut [T]) {
    let m = cast::<T>(xhat.len() as f64);
    let sum_d: T = dxhat.iter().copied().sum();
    let sum_dx: T = dxhat.iter().zip(xhat).map(|(&d, &h)| d * h).sum();
    for ((o, &d), &h) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o = rstd / m * (m * d - sum_d - h * sum_dx);
    }
}

fn check_groups<T: Element>(x: &Tensor<T>, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    expect_rank("group_norm", x, 4)?;
    let (n, c) = (x.shape[0], x.shape[1]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape("group_norm", format!("{c} channels not divisible into {groups} groups")));
    }
    if gamma.shape != [c] || beta.shape != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("affine params {:?}/{:?} for {c} channels", gamma.shape, beta.shape),
        ));
    }
    Ok((n, c, x.shape[2] * x.shape[3]))
}

pub fn group_norm<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (n, c, hw) = check_groups(x, groups, gamma, beta)?;
    let cpg = c / groups;
    let unit = cpg * hw;
    let mut y = Tensor::zeros(x.shape());
    let mut stats = NormStats { mean: Vec::with_capacity(n * groups), rstd: Vec::with_capacity(n * groups) };
    for u in 0..n * groups {
        let src = &x.data[u * unit..(u + 1) * unit];
        let (mean, rstd) = moments(src, eps);
        stats.mean.push(mean);
        stats.rstd.push(rstd);
        let g = u % groups;
        for (i, (&v, o)) in src.iter().zip(&mut y.data[u * unit..(u + 1) * unit]).enumerate() {
            let ch = g * cpg + i / hw;
            *o = gamma.data[ch] * (v - mean) * rstd + beta.data[ch];
        }
    }
    Ok((y, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_vjp<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, hw) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
    let cpg = c / groups;
    let unit = cpg * hw;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut xhat = vec![T::zero(); unit];
    let mut dxhat = vec![T::zero(); unit];
    for u in 0..n * groups {
        let g = u % groups;
        let (mean, rstd) = (stats.mean[u], stats.rstd[u]);
        let src = &x.data[u * unit..(u + 1) * unit];
        let gy = &dy.data[u * unit..(u + 1) * unit];
        for i in 0..unit {
            let ch = g * cpg + i / hw;
            xhat[i] = (src[i] - mean) * rstd;
            dxhat[i] = gy[i] * gamma.data[ch];
            dgamma.data[ch] += gy[i] * xhat[i];
            dbeta.data[ch] += gy[i];
        }
        norm_unit_vjp(&xhat, &dxhat, rstd, &mut dx.data[u * unit..(u + 1) * unit]);
    }
    (dx, dgamma, dbeta)
}

pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let d = *x.shape.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("affine params {:?}/{:?} for width {d}", gamma.shape, beta.shape),
        ));
    }
    let rows = x.numel() / d;
    let mut y = Tensor::zeros(x.shape());
    let mut stats = NormStats { mean: Vec::with_capacity(rows), rstd: Vec::with_capacity(rows) };
    for (src, dst) in x.data.chunks(d).zip(y.data.chunks_mut(d)) {
        let (mean, rstd) = moments(src, eps);
        stats.mean.push(mean);
        stats.rstd.push(rstd);
        for (i, (&v, o)) in src.iter().zip(dst).enumerate() {
            *o = gamma.data[i] * (v - mean) * rstd + beta.data[i];
        }
    }
    Ok((y, stats))
}

pub fn layer_norm_vjp<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = *x.shape.last().unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, ((src, gy), dst)) in x.data.chunks(d).zip(dy.data.chunks(d)).zip(dx.data.chunks_mut(d)).enumerate() {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        for i in 0..d {
            xhat[i] = (src[i] - mean) * rstd;
            dxhat[i] = gy[i] * gamma.data[i];
            dgamma.data[i] += gy[i] * xhat[i];
            dbeta.data[i] += gy[i];
        }
        norm_unit_vjp(&xhat, &dxhat, rstd, dst);
    }
    (dx, dgamma, dbeta)
}
