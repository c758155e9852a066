//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] evaluates operations eagerly and records each result together
//! with what is needed to form its vector-Jacobian product. Calling
//! [`Graph::backward`] replays the tape in reverse. Nodes that do not depend on
//! a trainable parameter or a gradient-requiring input are skipped.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::norm::NormStats;
use crate::tensor::{attention, conv, norm, ops, resize, Element, Tensor};

static NEXT_GRAPH_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: usize,
    index: usize,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Gelu(usize),
    L2Normalize(usize, T),
    Softmax(usize),
    Matmul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, padding: usize },
    Deconv2d { x: usize, w: usize, b: usize, kernel: usize },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, stats: NormStats<T> },
    LayerNorm { x: usize, gamma: usize, beta: usize, stats: NormStats<T> },
    Bilinear(usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    RepeatBatch(usize),
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Tensor<T> },
    Sum(usize),
    Bce { logits: usize, targets: Vec<T>, valid: Vec<bool>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T = f32> {
    id: usize,
    nodes: Vec<Node<T>>,
    params: HashMap<String, usize>,
    grad_enabled: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    graph: usize,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records no gradient information.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to this graph".into()));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "variable does not belong to this graph");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records an input whose gradient should be computed.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: requires_grad && self.grad_enabled });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    /// Binds a stored parameter. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&i) = self.params.get(name) {
            return Ok(Var { graph: self.id, index: i });
        }
        let p = store.get(name)?;
        let v = self.leaf(p.value.clone(), p.trainable)?;
        self.params.insert(name.to_string(), v.index);
        Ok(v)
    }

    /// Makes later `param(_, name)` calls resolve to `var` instead of the store.
    /// Used to differentiate a model with respect to chosen parameters.
    pub fn bind_param(&mut self, name: &str, var: Var) -> Result<()> {
        let i = self.idx(var)?;
        self.params.insert(name.to_string(), i);
        Ok(())
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).map(|&index| Var { graph: self.id, index })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let y = ops::add(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push("add", y, Op::Add(ia, ib), &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let y = ops::mul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push("mul", y, Op::Mul(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let y = ops::scale(&self.nodes[ia].value, c);
        self.push("scale", y, Op::Scale(ia, c), &[ia])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let y = ops::relu(&self.nodes[ia].value);
        self.push("relu", y, Op::Relu(ia), &[ia])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let y = ops::sigmoid(&self.nodes[ia].value);
        self.push("sigmoid", y, Op::Sigmoid(ia), &[ia])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let y = ops::gelu(&self.nodes[ia].value);
        self.push("gelu", y, Op::Gelu(ia), &[ia])
    }

    /// L2 normalization over the last (channel) axis.
    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let y = ops::l2_normalize(&self.nodes[ia].value, eps);
        self.push("l2_normalize", y, Op::L2Normalize(ia, eps), &[ia])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let y = ops::softmax_lastdim(&self.nodes[ia].value);
        self.push("softmax", y, Op::Softmax(ia), &[ia])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let y = ops::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push("matmul", y, Op::Matmul(ia, ib), &[ia, ib])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let y = ops::linear(&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value)?;
        self.push("linear", y, Op::Linear { x: ix, w: iw, b: ib }, &[ix, iw, ib])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let y = conv::conv2d(&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value, stride, padding)?;
        self.push("conv2d", y, Op::Conv2d { x: ix, w: iw, b: ib, stride, padding }, &[ix, iw, ib])
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, kernel: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let y = conv::deconv2d(&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value, stride, kernel)?;
        self.push("deconv2d", y, Op::Deconv2d { x: ix, w: iw, b: ib, kernel }, &[ix, iw, ib])
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (y, stats) = norm::group_norm(&self.nodes[ix].value, groups, &self.nodes[ig].value, &self.nodes[ib].value, eps)?;
        self.push("group_norm", y, Op::GroupNorm { x: ix, gamma: ig, beta: ib, groups, stats }, &[ix, ig, ib])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (y, stats) = norm::layer_norm(&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value, eps)?;
        self.push("layer_norm", y, Op::LayerNorm { x: ix, gamma: ig, beta: ib, stats }, &[ix, ig, ib])
    }

    /// Bilinear resize of the last two axes.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = resize::bilinear_resize(&self.nodes[ix].value, out_h, out_w)?;
        self.push("bilinear_resize", y, Op::Bilinear(ix), &[ix])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = ops::permute(&self.nodes[ix].value, perm)?;
        self.push("permute", y, Op::Permute(ix, perm.to_vec()), &[ix])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = self.nodes[ix].value.clone().reshape(shape)?;
        self.push("reshape", y, Op::Reshape(ix), &[ix])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let y = ops::concat(&refs, axis)?;
        self.push("concat", y, Op::Concat { parts: idx.clone(), axis }, &idx)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = ops::slice(&self.nodes[ix].value, axis, start, len)?;
        self.push("slice", y, Op::Slice { x: ix, axis, start }, &[ix])
    }

    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = ops::repeat_batch(&self.nodes[ix].value, n)?;
        self.push("repeat_batch", y, Op::RepeatBatch(ix), &[ix])
    }

    /// Multi-head attention over `[tokens, width]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (y, probs) =
            attention::attention(&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value, heads)?;
        self.push("attention", y, Op::Attention { q: iq, k: ik, v: iv, heads, probs }, &[iq, ik, iv])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = Tensor::scalar(self.nodes[ix].value.sum());
        self.push("sum", y, Op::Sum(ix), &[ix])
    }

    /// Mean per-pixel binary cross-entropy of `logits [H, W, N]` against
    /// one-hot targets built from `targets` (row-major `H×W` class indices).
    /// Pixels labeled `unlabeled` contribute neither loss nor gradient. The
    /// mean is taken over labeled pixels × N; with no labeled pixels the loss is 0.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[u8], unlabeled: u8) -> Result<Var> {
        let il = self.idx(logits)?;
        let x = &self.nodes[il].value;
        if x.rank() != 3 || x.shape()[0] * x.shape()[1] != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs {} target pixels", x.shape(), targets.len()),
            ));
        }
        let n = x.shape()[2];
        let mut onehot = vec![T::zero(); x.numel()];
        let mut valid = vec![false; targets.len()];
        for (p, &t) in targets.iter().enumerate() {
            if t == unlabeled {
                continue;
            }
            if t as usize >= n {
                return Err(Error::ClassIndex { index: t as usize, classes: n });
            }
            valid[p] = true;
            onehot[p * n + t as usize] = T::one();
        }
        let count = valid.iter().filter(|&&v| v).count() * n;
        let mut total = T::zero();
        for (p, ok) in valid.iter().enumerate() {
            if !ok {
                continue;
            }
            for c in 0..n {
                let (z, y) = (x.data()[p * n + c], onehot[p * n + c]);
                // max(z,0) - z·y + log(1 + e^{-|z|})
                total += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_f64_lossy(count as f64) };
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::Bce { logits: il, targets: onehot, valid, count },
            &[il],
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::Usage("backward on an inference-only graph".into()));
        }
        let out = self.idx(output)?;
        if self.nodes[out].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[out].value.shape()
            )));
        }
        self.backward_with(output, Tensor::ones(self.nodes[out].value.shape()))
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, output: Var, cotangent: Tensor<T>) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::Usage("backward on an inference-only graph".into()));
        }
        let out = self.idx(output)?;
        if cotangent.shape() != self.nodes[out].value.shape() {
            return Err(Error::shape("backward", "cotangent shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(cotangent);
        for i in (0..=out).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    /// Adds parameter gradients into the store; frozen parameters are skipped.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        if grads.graph != self.id {
            return Err(Error::Usage("gradients come from a different graph".into()));
        }
        let mut names: Vec<(&String, &usize)> = self.params.iter().collect();
        names.sort();
        for (name, &i) in names {
            if let Some(g) = &grads.grads[i] {
                store.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |j: usize| &self.nodes[j].value;
        let mut send = |j: usize, d: Tensor<T>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                send(*a, ops::zip_map(g, val(*b), |x, y| x * y));
                send(*b, ops::zip_map(g, val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => send(*a, ops::scale(g, *c)),
            Op::Relu(a) => send(*a, ops::relu_vjp(val(*a), g)),
            Op::Sigmoid(a) => send(*a, ops::sigmoid_vjp(val(i), g)),
            Op::Gelu(a) => send(*a, ops::gelu_vjp(val(*a), g)),
            Op::L2Normalize(a, eps) => send(*a, ops::l2_normalize_vjp(val(*a), g, *eps)),
            Op::Softmax(a) => send(*a, ops::softmax_lastdim_vjp(val(i), g)),
            Op::Matmul(a, b) => {
                let (da, db) = ops::matmul_vjp(val(*a), val(*b), g);
                send(*a, da);
                send(*b, db);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_vjp(val(*x), val(*w), g);
                send(*x, dx);
                send(*w, dw);
                send(*b, db);
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let (dx, dw, db) = conv::conv2d_vjp(val(*x), val(*w), g, *stride, *padding);
                send(*x, dx);
                send(*w, dw);
                send(*b, db);
            }
            Op::Deconv2d { x, w, b, kernel } => {
                let (dx, dw, db) = conv::deconv2d_vjp(val(*x), val(*w), g, *kernel);
                send(*x, dx);
                send(*w, dw);
                send(*b, db);
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (dx, dg, db) = norm::group_norm_vjp(val(*x), *groups, val(*gamma), stats, g);
                send(*x, dx);
                send(*gamma, dg);
                send(*beta, db);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (dx, dg, db) = norm::layer_norm_vjp(val(*x), val(*gamma), stats, g);
                send(*x, dx);
                send(*gamma, dg);
                send(*beta, db);
            }
            Op::Bilinear(x) => send(*x, resize::bilinear_resize_vjp(val(*x).shape(), g)),
            Op::Permute(x, perm) => {
                let inv = ops::inverse_permutation(perm);
                send(*x, ops::permute(g, &inv).expect("inverse permutation is valid"));
            }
            Op::Reshape(x) => send(*x, g.clone().reshape(val(*x).shape()).expect("same size")),
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    send(p, ops::slice(g, *axis, start, len).expect("concat layout"));
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => send(*x, ops::slice_vjp(val(*x).shape(), g, *axis, *start)),
            Op::RepeatBatch(x) => send(*x, ops::repeat_batch_vjp(g)),
            Op::Attention { q, k, v, heads, probs } => {
                let (dq, dk, dv) = attention::attention_vjp(val(*q), val(*k), val(*v), probs, *heads, g);
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::Bce { logits, targets, valid, count } => {
                let x = val(*logits);
                let n = x.shape()[2];
                let mut dx = Tensor::zeros(x.shape());
                if *count > 0 {
                    let scale = g.data()[0] / T::from_f64_lossy(*count as f64);
                    for (p, ok) in valid.iter().enumerate() {
                        if !ok {
                            continue;
                        }
                        for c in 0..n {
                            let o = p * n + c;
                            dx.data_mut()[o] = (ops::sigmoid_scalar(x.data()[o]) - targets[o]) * scale;
                        }
                    }
                }
                send(*logits, dx);
            }
        }
    }
}
