//! Upsampling decoder that re-injects encoder taps at every stage.
//!
//! The fused volume starts on the stride-16 grid. Each of two blocks doubles
//! the grid with a transposed conv, concatenates projected taps from both
//! encoders, and refines with conv3×3 followed by two AGR units
//! (conv3×3, group norm, ReLU). A query-shared conv3×3 reduces to one channel
//! and bilinear ×4 restores full resolution.
//!
//! Tap projections per stage (target grid, upsampling, then linear to `C_tap`):
//!
//! | stage | grid  | generalist tap n1/n2 (stride 16) | specialist tap n1/n2 (stride 8) |
//! |-------|-------|----------------------------------|---------------------------------|
//! | 1     | H/8   | ×2                               | none                            |
//! | 2     | H/4   | ×2, ×2                           | ×2                              |

use crate::autograd::{Graph, Var};
use crate::encoders::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn;
use crate::param::{Initializer, ParamStore};
use crate::tensor::Element;

/// Projected taps for one stage, each `[1, C_tap, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedTaps {
    pub g: Var,
    pub s: Var,
}

#[derive(Clone, Debug)]
pub struct Ripd {
    pub latent_dim: usize,
    pub tap_dim: usize,
    pub decoder_dim: usize,
    pub gn_groups: usize,
    pub generalist_width: usize,
    pub specialist_width: usize,
    pub generalist_taps: [usize; 2],
    pub specialist_taps: [usize; 2],
}

/// Number of ×2 transposed convs applied to (generalist, specialist) taps at a stage.
fn upsamplings(stage: usize) -> (usize, usize) {
    if stage == 1 {
        (1, 0)
    } else {
        (2, 1)
    }
}

impl Ripd {
    pub fn init_params<T: Element>(&self, init: &mut Initializer<'_, T>) {
        for stage in 1..=2 {
            let (ug, us) = upsamplings(stage);
            for (stream, width, ups) in [("g", self.generalist_width, ug), ("s", self.specialist_width, us)] {
                let base = format!("ripd.tap{stage}.{stream}");
                for u in 0..ups {
                    init.deconv(&format!("{base}.up{u}"), width, width, 2);
                }
                init.linear(&format!("{base}.proj"), width, self.tap_dim);
            }
        }
        for (i, cin) in [(1, self.latent_dim), (2, self.decoder_dim)] {
            let base = format!("ripd.block{i}");
            init.deconv(&format!("{base}.up"), cin, cin, 2);
            init.conv(&format!("{base}.conv"), cin + 2 * self.tap_dim, self.decoder_dim, 3);
            for j in 1..=2 {
                init.conv(&format!("{base}.agr{j}.conv"), self.decoder_dim, self.decoder_dim, 3);
                init.norm(&format!("{base}.agr{j}.gn"), self.decoder_dim);
            }
        }
        init.conv("ripd.head", self.decoder_dim, 1, 3);
    }

    /// Projects the stage's taps (`stage` 1 uses layer n1, stage 2 layer n2)
    /// onto the grid at stride `16 / 2^stage`.
    pub fn project_taps<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        gen: &FeaturePyramid,
        spec: &FeaturePyramid,
        stage: usize,
    ) -> Result<ProjectedTaps> {
        if !(1..=2).contains(&stage) {
            return Err(Error::Usage(format!("decoder stage {stage} out of range 1..=2")));
        }
        let (ug, us) = upsamplings(stage);
        let tg = gen.tap(self.generalist_taps[stage - 1])?;
        let ts = spec.tap(self.specialist_taps[stage - 1])?;
        let pg = project_tap(g, store, &format!("ripd.tap{stage}.g"), tg, ug)?;
        let ps = project_tap(g, store, &format!("ripd.tap{stage}.s"), ts, us)?;
        if g.shape(pg)[2..] != g.shape(ps)[2..] {
            return Err(Error::shape(
                "project_taps",
                format!("stage {stage}: generalist tap {:?} vs specialist tap {:?}", g.shape(pg), g.shape(ps)),
            ));
        }
        Ok(ProjectedTaps { g: pg, s: ps })
    }

    /// Full decode: `zf [N, D_z, H/16, W/16]` to logits `[H, W, N]`.
    pub fn predict<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        zf: Var,
        gen: &FeaturePyramid,
        spec: &FeaturePyramid,
    ) -> Result<Var> {
        let mut z = zf;
        for stage in 1..=2 {
            let taps = self.project_taps(g, store, gen, spec, stage)?;
            z = decoder_block(g, store, &format!("ripd.block{stage}"), z, taps, self.gn_groups)?;
        }
        let y = nn::conv(g, store, "ripd.head", z, 1, 1)?;
        let s = g.shape(y).to_vec();
        let (n, h, w) = (s[0], s[2] * 4, s[3] * 4);
        let y = g.bilinear_resize(y, h, w)?;
        let y = g.reshape(y, &[n, h, w])?;
        g.permute(y, &[1, 2, 0])
    }
}

/// `[h, w, C]` tap: `ups` ×2 transposed convs, then linear to the tap width.
/// Returns `[1, C_tap, h·2^ups, w·2^ups]`.
pub fn project_tap<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    tap: Var,
    ups: usize,
) -> Result<Var> {
    let mut x = tap;
    if ups > 0 {
        x = nn::hwc_to_nchw(g, x)?;
        for u in 0..ups {
            x = nn::deconv(g, store, &format!("{name}.up{u}"), x, 2)?;
        }
        x = nn::nchw_to_hwc(g, x)?;
    }
    let x = nn::linear(g, store, &format!("{name}.proj"), x)?;
    nn::hwc_to_nchw(g, x)
}

/// `relu(group_norm(conv3(x)))`.
pub fn agr<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var, groups: usize) -> Result<Var> {
    let y = nn::conv(g, store, &format!("{name}.conv"), x, 1, 1)?;
    let y = nn::group_norm(g, store, &format!("{name}.gn"), y, groups)?;
    g.relu(y)
}

/// Doubles the grid of `z [N, C, h, w]` and merges the stage's taps, which are
/// broadcast over the query axis.
pub fn decoder_block<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    z: Var,
    taps: ProjectedTaps,
    groups: usize,
) -> Result<Var> {
    let up = nn::deconv(g, store, &format!("{name}.up"), z, 2)?;
    let n = g.shape(up)[0];
    for t in [taps.g, taps.s] {
        if g.shape(t)[2..] != g.shape(up)[2..] {
            return Err(Error::shape(
                "decoder_block",
                format!("tap grid {:?} does not match upsampled state {:?}", &g.shape(t)[2..], &g.shape(up)[2..]),
            ));
        }
    }
    let tg = g.repeat_batch(taps.g, n)?;
    let ts = g.repeat_batch(taps.s, n)?;
    let x = g.concat(&[up, tg, ts], 1)?;
    let x = nn::conv(g, store, &format!("{name}.conv"), x, 1, 1)?;
    let x = agr(g, store, &format!("{name}.agr1"), x, groups)?;
    agr(g, store, &format!("{name}.agr2"), x, groups)
}
