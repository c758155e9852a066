//! Fused multi-head scaled dot-product attention over `[tokens, width]` inputs.

use super::ops::{gemm, softmax_in_place, MatRef};
use super::{cast, expect_rank, Element, Tensor};
use crate::error::{Error, Result};

fn head_slice<T: Element>(x: &Tensor<T>, head: usize, dh: usize) -> Vec<T> {
    let width = x.shape[1];
    x.data.chunks(width).flat_map(|row| row[head * dh..(head + 1) * dh].iter().copied()).collect()
}

fn scatter_head<T: Element>(dst: &mut Tensor<T>, src: &[T], head: usize, dh: usize) {
    let width = dst.shape[1];
    for (row, s) in dst.data.chunks_mut(width).zip(src.chunks(dh)) {
        row[head * dh..(head + 1) * dh].copy_from_slice(s);
    }
}

fn check<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<(usize, usize)> {
    expect_rank("attention", q, 2)?;
    if q.shape != k.shape || q.shape != v.shape {
        return Err(Error::shape("attention", format!("q {:?}, k {:?}, v {:?}", q.shape, k.shape, v.shape)));
    }
    let width = q.shape[1];
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape("attention", format!("width {width} not divisible by {heads} heads")));
    }
    Ok((q.shape[0], width / heads))
}

/// Row-stochastic attention weights `[heads, tokens, tokens]`.
pub fn attention_probs<T: Element>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    check(q, k, k, heads)?;
    let (t, dh) = (q.shape[0], q.shape[1] / heads);
    let scale = cast::<T>(1.0 / (dh as f64).sqrt());
    let mut probs = Tensor::zeros(&[heads, t, t]);
    for (h, p) in probs.data.chunks_mut(t * t).enumerate() {
        let qh = head_slice(q, h, dh);
        let kh = head_slice(k, h, dh);
        gemm(MatRef::row_major(&qh, dh), MatRef::transposed(&kh, dh), p, dh, t, false);
        for row in p.chunks_mut(t) {
            row.iter_mut().for_each(|s| *s *= scale);
            softmax_in_place(row);
        }
    }
    Ok(probs)
}

/// Returns the attended values and the attention weights.
pub fn attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (t, dh) = check(q, k, v, heads)?;
    let probs = attention_probs(q, k, heads)?;
    let mut out = Tensor::zeros(q.shape());
    let mut oh = vec![T::zero(); t * dh];
    for h in 0..heads {
        let vh = head_slice(v, h, dh);
        gemm(
            MatRef::row_major(&probs.data[h * t * t..(h + 1) * t * t], t),
            MatRef::row_major(&vh, dh),
            &mut oh,
            t,
            dh,
            false,
        );
        scatter_head(&mut out, &oh, h, dh);
    }
    Ok((out, probs))
}

/// Returns `(dq, dk, dv)`.
pub fn attention_vjp<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    heads: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (t, width) = (q.shape[0], q.shape[1]);
    let dh = width / heads;
    let scale = cast::<T>(1.0 / (dh as f64).sqrt());
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![T::zero(); t * t];
    let mut buf = vec![T::zero(); t * dh];
    for h in 0..heads {
        let p = &probs.data[h * t * t..(h + 1) * t * t];
        let (qh, kh, vh, gh) = (head_slice(q, h, dh), head_slice(k, h, dh), head_slice(v, h, dh), head_slice(dy, h, dh));

        gemm(MatRef::transposed(p, t), MatRef::row_major(&gh, dh), &mut buf, t, dh, false);
        scatter_head(&mut dv, &buf, h, dh);

        gemm(MatRef::row_major(&gh, dh), MatRef::transposed(&vh, dh), &mut dp, dh, t, false);
        for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
            let inner: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in drow.iter_mut().zip(prow) {
                *d = pv * (*d - inner) * scale;
            }
        }

        gemm(MatRef::row_major(&dp, t), MatRef::row_major(&kh, dh), &mut buf, t, dh, false);
        scatter_head(&mut dq, &buf, h, dh);
        gemm(MatRef::transposed(&dp, t), MatRef::row_major(&qh, dh), &mut buf, t, dh, false);
        scatter_head(&mut dk, &buf, h, dh);
    }
    (dq, dk, dv)
}
