//! Query-guided fusion of the two encoder streams.
//!
//! Each stream's features are compared against every query by cosine
//! similarity, giving a cost volume `[h, w, N]`. A 7×7 convolution lifts each
//! query's slice to `D_z` channels; the query axis is carried as the batch
//! axis so weights are shared across queries and any vocabulary size works.
//! Internally latent volumes are laid out `[N, D_z, h, w]`.

use crate::autograd::{Graph, Var};
use crate::encoders::Stream;
use crate::error::{Error, Result};
use crate::nn;
use crate::param::{Initializer, ParamStore};
use crate::tensor::{ops, Element, Tensor};

/// Guard for normalizing zero vectors; a zero row maps to zero.
pub const NORM_EPS: f64 = 1e-12;

/// Cosine similarities `[h, w, N]` for one stream.
#[derive(Clone, Debug)]
pub struct CostVolume<T = f32> {
    pub values: Tensor<T>,
    pub stream: Stream,
}

/// An embedded cost volume `[h, w, N, D_z]`.
#[derive(Clone, Debug)]
pub struct LatentVolume<T = f32> {
    pub values: Tensor<T>,
}

impl<T: Element> LatentVolume<T> {
    /// Converts from the internal `[N, D_z, h, w]` layout.
    pub fn from_batched(t: &Tensor<T>) -> Result<Self> {
        Ok(LatentVolume { values: ops::permute(t, &[2, 3, 0, 1])? })
    }
}

/// `values[h, w, n] = <norm(e[h, w, :]), norm(q[n, :])>`.
pub fn compute_cost_volume<T: Element>(g: &mut Graph<T>, features: Var, queries: Var) -> Result<Var> {
    let (fs, qs) = (g.shape(features).to_vec(), g.shape(queries).to_vec());
    if fs.len() != 3 || qs.len() != 2 || fs[2] != qs[1] {
        return Err(Error::shape(
            "compute_cost_volume",
            format!("features {fs:?} and queries {qs:?} must be [h, w, D] and [N, D]"),
        ));
    }
    let eps = T::from_f64_lossy(NORM_EPS);
    let e = g.l2_normalize(features, eps)?;
    let e = g.reshape(e, &[fs[0] * fs[1], fs[2]])?;
    let q = g.l2_normalize(queries, eps)?;
    let qt = g.permute(q, &[1, 0])?;
    let m = g.matmul(e, qt)?;
    g.reshape(m, &[fs[0], fs[1], qs[0]])
}

/// `sigmoid(conv7(M))` per query; `[h, w, N]` to `[N, D_z, h, w]`.
pub fn embed_cost_volume<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, cost: Var) -> Result<Var> {
    let s = g.shape(cost).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("embed_cost_volume", format!("expected [h, w, N], got {s:?}")));
    }
    let m = g.permute(cost, &[2, 0, 1])?;
    let m = g.reshape(m, &[s[2], 1, s[0], s[1]])?;
    let z = nn::conv(g, store, name, m, 1, 3)?;
    g.sigmoid(z)
}

/// `sigmoid(conv7(zg ⊕ zs)) + zg` with concatenation over channels.
pub fn fuse<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, zg: Var, zs: Var) -> Result<Var> {
    if g.shape(zg) != g.shape(zs) {
        return Err(Error::shape(
            "fuse",
            format!("generalist latent {:?} vs specialist latent {:?}", g.shape(zg), g.shape(zs)),
        ));
    }
    let cat = g.concat(&[zg, zs], 1)?;
    let z = nn::conv(g, store, name, cat, 1, 3)?;
    let z = g.sigmoid(z)?;
    g.add(z, zg)
}

/// Intermediate results of one fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct QgffOutput {
    pub cost_g: Var,
    pub cost_s: Var,
    pub zg: Var,
    pub zs: Var,
    pub zf: Var,
}

#[derive(Clone, Debug)]
pub struct Qgff {
    pub latent_dim: usize,
}

impl Qgff {
    pub const EMBED_G: &'static str = "qgff.embed_g";
    pub const EMBED_S: &'static str = "qgff.embed_s";
    pub const FUSE: &'static str = "qgff.fuse";

    pub fn init_params<T: Element>(&self, init: &mut Initializer<'_, T>) {
        init.conv(Self::EMBED_G, 1, self.latent_dim, 7);
        init.conv(Self::EMBED_S, 1, self.latent_dim, 7);
        init.conv(Self::FUSE, 2 * self.latent_dim, self.latent_dim, 7);
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        eg: Var,
        es: Var,
        queries: Var,
    ) -> Result<QgffOutput> {
        if g.shape(eg)[..2] != g.shape(es)[..2] {
            return Err(Error::shape(
                "qgff",
                format!("stream grids differ: {:?} vs {:?}", g.shape(eg), g.shape(es)),
            ));
        }
        let cost_g = compute_cost_volume(g, eg, queries)?;
        let cost_s = compute_cost_volume(g, es, queries)?;
        let zg = embed_cost_volume(g, store, Self::EMBED_G, cost_g)?;
        let zs = embed_cost_volume(g, store, Self::EMBED_S, cost_s)?;
        let zf = fuse(g, store, Self::FUSE, zg, zs)?;
        Ok(QgffOutput { cost_g, cost_s, zg, zs, zf })
    }
}
