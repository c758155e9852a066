//! Parameterized layers as graph helpers. Each resolves `{name}.weight` and
//! `{name}.bias` from the store.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::norm::{GROUP_NORM_EPS, LAYER_NORM_EPS};
use crate::tensor::Element;

fn wb<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<(Var, Var)> {
    Ok((g.param(store, &format!("{name}.weight"))?, g.param(store, &format!("{name}.bias"))?))
}

pub fn linear<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let (w, b) = wb(g, store, name)?;
    g.linear(x, w, b)
}

pub fn conv<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (w, b) = wb(g, store, name)?;
    g.conv2d(x, w, b, stride, padding)
}

pub fn deconv<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var, k: usize) -> Result<Var> {
    let (w, b) = wb(g, store, name)?;
    g.deconv2d(x, w, b, k, k)
}

pub fn layer_norm<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let (w, b) = wb(g, store, name)?;
    g.layer_norm(x, w, b, T::from_f64_lossy(LAYER_NORM_EPS))
}

pub fn group_norm<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    groups: usize,
) -> Result<Var> {
    let (w, b) = wb(g, store, name)?;
    g.group_norm(x, groups, w, b, T::from_f64_lossy(GROUP_NORM_EPS))
}

/// `[h, w, c]` to `[1, c, h, w]`.
pub fn hwc_to_nchw<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("hwc_to_nchw", format!("expected [h, w, c], got {s:?}")));
    }
    let t = g.permute(x, &[2, 0, 1])?;
    g.reshape(t, &[1, s[2], s[0], s[1]])
}

/// `[1, c, h, w]` to `[h, w, c]`.
pub fn nchw_to_hwc<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape("nchw_to_hwc", format!("expected [1, c, h, w], got {s:?}")));
    }
    let t = g.reshape(x, &[s[1], s[2], s[3]])?;
    g.permute(t, &[1, 2, 0])
}
