//! Elementwise, structural and matrix kernels.

use rayon::prelude::*;

use super::{cast, expect_rank, Element, Tensor};
use crate::error::{Error, Result};

/// Below this many multiply-adds a kernel runs on the calling thread.
pub(crate) const PAR_THRESHOLD: usize = 1 << 15;

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_vjp<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(x, dy, |v, g| if v > T::zero() { g } else { T::zero() })
}

#[inline]
pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Takes the forward output `y`, not the input.
pub fn sigmoid_vjp<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(y, dy, |s, g| g * s * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (cast::<T>(GELU_C), cast::<T>(GELU_A), cast::<T>(0.5));
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_vjp<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (c, a, half, three) = (cast::<T>(GELU_C), cast::<T>(GELU_A), cast::<T>(0.5), cast::<T>(3.0));
    zip_map(x, dy, |v, g| {
        let t = (c * (v + a * v * v * v)).tanh();
        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
        g * d
    })
}

pub(crate) fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor { shape: a.shape().to_vec(), data }
}

fn same_shape<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    Ok(zip_map(a, b, |x, y| x + y))
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    Ok(zip_map(a, b, |x, y| x * y))
}

pub fn scale<T: Element>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|v| v * c)
}

fn rows_of<T>(x: &Tensor<T>) -> (usize, usize) {
    let d = *x.shape.last().expect("rank >= 1");
    (x.data.len() / d, d)
}

/// Unit-normalizes the last axis with denominator `max(‖x‖, eps)`, so the
/// zero vector maps to the zero vector.
pub fn l2_normalize<T: Element>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let (_, d) = rows_of(x);
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let denom = norm.max(eps);
        for v in row.iter_mut() {
            *v = *v / denom;
        }
    }
    out
}

pub fn l2_normalize_vjp<T: Element>(x: &Tensor<T>, dy: &Tensor<T>, eps: T) -> Tensor<T> {
    let (_, d) = rows_of(x);
    let mut dx = Tensor::zeros(x.shape());
    for ((xr, gr), dr) in x.data.chunks(d).zip(dy.data.chunks(d)).zip(dx.data.chunks_mut(d)) {
        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > eps {
            let proj: T = xr.iter().zip(gr).map(|(&a, &g)| a * g).sum::<T>() / (norm * norm);
            for ((o, &a), &g) in dr.iter_mut().zip(xr).zip(gr) {
                *o = (g - a * proj) / norm;
            }
        } else {
            for (o, &g) in dr.iter_mut().zip(gr) {
                *o = g / eps;
            }
        }
    }
    dx
}

pub fn softmax_lastdim<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (_, d) = rows_of(x);
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Takes the forward output `y`.
pub fn softmax_lastdim_vjp<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (_, d) = rows_of(y);
    let mut dx = Tensor::zeros(y.shape());
    for ((yr, gr), dr) in y.data.chunks(d).zip(dy.data.chunks(d)).zip(dx.data.chunks_mut(d)) {
        let inner: T = yr.iter().zip(gr).map(|(&a, &g)| a * g).sum();
        for ((o, &a), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *o = a * (g - inner);
        }
    }
    dx
}

/// Strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Copy> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// View of the transpose of a row-major `rows × cols` matrix.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    #[inline]
    fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.rs + c * self.cs]
    }
}

/// Copies a strided view into a contiguous row-major `rows × cols` buffer.
fn pack<T: Element>(m: MatRef<T>, rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend((0..cols).map(|c| m.get(r, c)));
    }
    out
}

/// `out[m×n] (+)= a[m×k] · b[k×n]`.
///
/// Each output element is accumulated over `p = 0..k` in order, starting from
/// zero or from its previous value. The loop runs along whichever output axis
/// is longer so the innermost loop stays contiguous; both orientations
/// perform the same additions in the same order.
pub(crate) fn gemm<T: Element>(a: MatRef<T>, b: MatRef<T>, out: &mut [T], k: usize, n: usize, accumulate: bool) {
    let m = out.len() / n;
    if n >= m || n >= 64 {
        let bp;
        let b_rows: &[T] = if b.cs == 1 && b.rs == n {
            &b.data[..k * n]
        } else {
            bp = pack(b, k, n);
            &bp
        };
        let a_rows;
        let a_rm: &[T] = if a.cs == 1 && a.rs == k {
            &a.data[..m * k]
        } else {
            a_rows = pack(a, m, k);
            &a_rows
        };
        row_products(a_rm, b_rows, out, k, n, accumulate);
    } else {
        // outᵀ[n×m] = bᵀ[n×k] · aᵀ[k×m]
        let bt = pack(MatRef { data: b.data, rs: b.cs, cs: b.rs }, n, k);
        let at = pack(MatRef { data: a.data, rs: a.cs, cs: a.rs }, k, m);
        let mut tmp = if accumulate { pack(MatRef { data: out, rs: 1, cs: n }, n, m) } else { vec![T::zero(); n * m] };
        row_products(&bt, &at, &mut tmp, k, m, true);
        for (j, row) in tmp.chunks(m).enumerate() {
            for (i, &v) in row.iter().enumerate() {
                out[i * n + j] = v;
            }
        }
    }
}

/// Row-major `out[m×n] (+)= a[m×k] · b[k×n]`, i-p-j loop order.
fn row_products<T: Element>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize, accumulate: bool) {
    let m = out.len() / n;
    let row_kernel = |(i, row): (usize, &mut [T])| {
        if !accumulate {
            row.iter_mut().for_each(|v| *v = T::zero());
        }
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
}

/// Batched matrix product over the last two axes. `b` is either rank 2
/// (shared across the batch) or carries the same leading axes as `a`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n, shared) = matmul_dims(a, b)?;
    let mut shape = a.shape[..a.rank() - 1].to_vec();
    shape.push(n);
    let mut out = Tensor::zeros(&shape);
    for bi in 0..batch {
        let a_blk = &a.data[bi * m * k..(bi + 1) * m * k];
        let b_blk = if shared { &b.data[..] } else { &b.data[bi * k * n..(bi + 1) * k * n] };
        gemm(
            MatRef::row_major(a_blk, k),
            MatRef::row_major(b_blk, n),
            &mut out.data[bi * m * n..(bi + 1) * m * n],
            k,
            n,
            false,
        );
    }
    Ok(out)
}

fn matmul_dims<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize, bool)> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
    }
    let m = a.shape[a.rank() - 2];
    let k = a.shape[a.rank() - 1];
    let kb = b.shape[b.rank() - 2];
    let n = b.shape[b.rank() - 1];
    let shared = b.rank() == 2;
    let batch_a: usize = a.shape[..a.rank() - 2].iter().product();
    if k != kb || (!shared && b.shape[..b.rank() - 2] != a.shape[..a.rank() - 2]) {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
    }
    Ok((batch_a, m, k, n, shared))
}

pub fn matmul_vjp<T: Element>(a: &Tensor<T>, b: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (batch, m, k, n, shared) = matmul_dims(a, b).expect("validated in forward");
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for bi in 0..batch {
        let a_blk = &a.data[bi * m * k..(bi + 1) * m * k];
        let g_blk = &dy.data[bi * m * n..(bi + 1) * m * n];
        let b_range = if shared { 0..k * n } else { bi * k * n..(bi + 1) * k * n };
        // da = dy · bᵀ
        gemm(
            MatRef::row_major(g_blk, n),
            MatRef::transposed(&b.data[b_range.clone()], n),
            &mut da.data[bi * m * k..(bi + 1) * m * k],
            n,
            k,
            false,
        );
        // db = aᵀ · dy
        gemm(MatRef::transposed(a_blk, k), MatRef::row_major(g_blk, n), &mut db.data[b_range], m, n, true);
    }
    (da, db)
}

/// Affine map over the last axis: `x[..., din] · w[din, dout] + b[dout]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("linear", w, 2)?;
    let (rows, din) = rows_of(x);
    let dout = w.shape[1];
    if w.shape[0] != din || b.shape != [dout] {
        return Err(Error::shape(
            "linear",
            format!("input {:?}, weight {:?}, bias {:?}", x.shape, w.shape, b.shape),
        ));
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = dout;
    let mut data = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        data.extend_from_slice(&b.data);
    }
    gemm(MatRef::row_major(&x.data, din), MatRef::row_major(&w.data, dout), &mut data, din, dout, true);
    Ok(Tensor { shape, data })
}

pub fn linear_vjp<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (rows, din) = rows_of(x);
    let dout = w.shape[1];
    let mut dx = Tensor::zeros(x.shape());
    gemm(MatRef::row_major(&dy.data, dout), MatRef::transposed(&w.data, dout), &mut dx.data, dout, din, false);
    let mut dw = Tensor::zeros(w.shape());
    gemm(MatRef::transposed(&x.data, din), MatRef::row_major(&dy.data, dout), &mut dw.data, rows, dout, false);
    let mut db = Tensor::zeros(&[dout]);
    for row in dy.data.chunks(dout) {
        for (o, &g) in db.data.iter_mut().zip(row) {
            *o += g;
        }
    }
    (dx, dw, db)
}

pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", format!("invalid permutation {perm:?} for {:?}", x.shape)));
    }
    let in_strides = strides(&x.shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; r];
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        data.push(x.data[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let r = first.rank();
    if axis >= r {
        return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", first.shape)));
    }
    for p in parts {
        let compatible = p.rank() == r
            && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", first.shape, p.shape),
            ));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let blk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * blk..(o + 1) * blk]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Takes `len` entries starting at `start` along `axis`.
pub fn slice<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape[axis] {
        return Err(Error::shape(
            "slice",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape),
        ));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut shape = x.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    let blk = x.shape[axis] * inner;
    for o in 0..outer {
        let base = o * blk + start * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    Ok(Tensor { shape, data })
}

pub fn slice_vjp<T: Element>(in_shape: &[usize], dy: &Tensor<T>, axis: usize, start: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let len = dy.shape[axis];
    let blk = in_shape[axis] * inner;
    for o in 0..outer {
        let base = o * blk + start * inner;
        dx.data[base..base + len * inner].copy_from_slice(&dy.data[o * len * inner..(o + 1) * len * inner]);
    }
    dx
}

/// Tiles a tensor with leading extent 1 `n` times along axis 0.
pub fn repeat_batch<T: Element>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    if x.rank() == 0 || x.shape[0] != 1 || n == 0 {
        return Err(Error::shape("repeat_batch", format!("{:?} x{n}", x.shape)));
    }
    let mut shape = x.shape.clone();
    shape[0] = n;
    let mut data = Vec::with_capacity(x.numel() * n);
    for _ in 0..n {
        data.extend_from_slice(&x.data);
    }
    Ok(Tensor { shape, data })
}

pub fn repeat_batch_vjp<T: Element>(dy: &Tensor<T>) -> Tensor<T> {
    let mut shape = dy.shape.clone();
    shape[0] = 1;
    let inner = dy.numel() / dy.shape[0];
    let mut dx = Tensor::zeros(&shape);
    for blk in dy.data.chunks(inner) {
        for (o, &g) in dx.data.iter_mut().zip(blk) {
            *o += g;
        }
    }
    dx
}
