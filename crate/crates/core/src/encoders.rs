//! The two ViT-style image encoders.
//!
//! The generalist patchifies at stride 16 and projects its final tokens to the
//! query width `D`. The specialist patchifies at stride 8 and aligns its final
//! tokens to the stride-16 grid with a 2×2, stride-2 convolution. Both expose
//! block outputs at two configurable depths as taps; specialist taps stay at
//! the native stride-8 grid.

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::config::{EncoderConfig, FreezePolicy};
use crate::error::{Error, Result};
use crate::nn;
use crate::param::{Initializer, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Generalist,
    Specialist,
}

impl Stream {
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Generalist => "generalist",
            Stream::Specialist => "specialist",
        }
    }
}

/// Encoder outputs for one image, as graph variables.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `[H/16, W/16, D]`.
    pub final_features: Var,
    /// Block outputs keyed by 1-based layer, each `[h, w, width]`.
    pub taps: BTreeMap<usize, Var>,
}

impl FeaturePyramid {
    pub fn tap(&self, layer: usize) -> Result<Var> {
        self.taps
            .get(&layer)
            .copied()
            .ok_or_else(|| Error::Usage(format!("feature pyramid has no tap at layer {layer}")))
    }
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub stream: Stream,
    pub config: EncoderConfig,
    /// Width of the final features (the query dimension).
    pub out_dim: usize,
    /// Patch grid the positional embeddings were created for.
    pub pos_grid: usize,
}

impl VisionEncoder {
    pub fn new(stream: Stream, config: EncoderConfig, out_dim: usize, image_size: usize) -> Self {
        let pos_grid = image_size / config.patch_stride;
        VisionEncoder { stream, config, out_dim, pos_grid }
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.stream.prefix())
    }

    pub fn init_params<T: Element>(&self, init: &mut Initializer<'_, T>) {
        let c = &self.config;
        let p = c.patch_stride;
        init.conv(&self.name("patch_embed"), 3, c.width, p);
        init.trunc_normal(&self.name("cls_token"), &[1, c.width]);
        init.trunc_normal(&self.name("cls_pos"), &[1, c.width]);
        init.trunc_normal(&self.name("pos_embed"), &[c.width, self.pos_grid, self.pos_grid]);
        for i in 0..c.depth {
            init_block(init, &self.name(&format!("blocks.{i}")), c.width, c.mlp_ratio);
        }
        init.norm(&self.name("ln_post"), c.width);
        match self.stream {
            Stream::Generalist => init.linear(&self.name("proj"), c.width, self.out_dim),
            Stream::Specialist => init.conv(&self.name("align"), c.width, self.out_dim, 2),
        }
    }

    fn check_image<T: Element>(&self, g: &Graph<T>, image: Var) -> Result<(usize, usize)> {
        let s = g.shape(image);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("encoder", format!("image must be [3, H, W], got {s:?}")));
        }
        if s[1] % 16 != 0 || s[2] % 16 != 0 {
            return Err(Error::shape("encoder", format!("image extent {}x{} not divisible by 16", s[1], s[2])));
        }
        Ok((s[1], s[2]))
    }

    /// Patch-embedded tokens `[gh*gw, width]` before any positional term,
    /// with the patch grid.
    pub fn patch_tokens<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<(Var, usize, usize)> {
        let (h, w) = self.check_image(g, image)?;
        let p = self.config.patch_stride;
        let x = g.reshape(image, &[1, 3, h, w])?;
        let x = nn::conv(g, store, &self.name("patch_embed"), x, p, 0)?;
        let (gh, gw) = (h / p, w / p);
        let x = g.reshape(x, &[self.config.width, gh * gw])?;
        Ok((g.permute(x, &[1, 0])?, gh, gw))
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<FeaturePyramid> {
        let width = self.config.width;
        let (tokens, gh, gw) = self.patch_tokens(g, store, image)?;
        let t = gh * gw;

        let mut pos = g.param(store, &self.name("pos_embed"))?;
        if (gh, gw) != (self.pos_grid, self.pos_grid) {
            pos = g.bilinear_resize(pos, gh, gw)?;
        }
        let pos = g.reshape(pos, &[width, t])?;
        let pos = g.permute(pos, &[1, 0])?;
        let tokens = g.add(tokens, pos)?;
        let cls = g.param(store, &self.name("cls_token"))?;
        let cls_pos = g.param(store, &self.name("cls_pos"))?;
        let cls = g.add(cls, cls_pos)?;
        let mut x = g.concat(&[cls, tokens], 0)?;

        let mut taps = BTreeMap::new();
        for i in 0..self.config.depth {
            x = transformer_block(g, store, &self.name(&format!("blocks.{i}")), x, self.config.heads)?;
            let layer = i + 1;
            if self.config.taps.contains(&layer) {
                let spatial = g.slice(x, 0, 1, t)?;
                taps.insert(layer, g.reshape(spatial, &[gh, gw, width])?);
            }
        }

        let x = nn::layer_norm(g, store, &self.name("ln_post"), x)?;
        let x = g.slice(x, 0, 1, t)?;
        let final_features = match self.stream {
            Stream::Generalist => {
                let y = nn::linear(g, store, &self.name("proj"), x)?;
                g.reshape(y, &[gh, gw, self.out_dim])?
            }
            Stream::Specialist => {
                let y = g.reshape(x, &[gh, gw, width])?;
                let y = nn::hwc_to_nchw(g, y)?;
                let y = nn::conv(g, store, &self.name("align"), y, 2, 0)?;
                nn::nchw_to_hwc(g, y)?
            }
        };
        Ok(FeaturePyramid { final_features, taps })
    }

    /// Sets the `trainable` flag of every parameter in this stream according
    /// to `policy`. Returns the number of trainable parameter tensors.
    pub fn apply_policy<T: Element>(&self, store: &mut ParamStore<T>, policy: FreezePolicy) -> usize {
        let prefix = format!("{}.", self.stream.prefix());
        let mut count = 0;
        store.set_trainable_where(|name| {
            let rest = name.strip_prefix(&prefix)?;
            let on = match policy {
                FreezePolicy::Freeze => false,
                FreezePolicy::Full => true,
                FreezePolicy::AttentionQv => is_qv_projection(rest),
            };
            count += on as usize;
            Some(on)
        });
        count
    }
}

fn is_qv_projection(rest: &str) -> bool {
    let parts: Vec<&str> = rest.split('.').collect();
    matches!(
        parts.as_slice(),
        ["blocks", i, "attn", "q" | "v", "weight" | "bias"] if i.parse::<usize>().is_ok()
    )
}

pub fn init_block<T: Element>(init: &mut Initializer<'_, T>, prefix: &str, width: usize, mlp_ratio: usize) {
    init.norm(&format!("{prefix}.ln1"), width);
    for proj in ["q", "k", "v", "out"] {
        init.linear(&format!("{prefix}.attn.{proj}"), width, width);
    }
    init.norm(&format!("{prefix}.ln2"), width);
    init.linear(&format!("{prefix}.mlp.fc1"), width, width * mlp_ratio);
    init.linear(&format!("{prefix}.mlp.fc2"), width * mlp_ratio, width);
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + fc2(gelu(fc1(ln2(x))))`.
pub fn transformer_block<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let h = nn::layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let q = nn::linear(g, store, &format!("{prefix}.attn.q"), h)?;
    let k = nn::linear(g, store, &format!("{prefix}.attn.k"), h)?;
    let v = nn::linear(g, store, &format!("{prefix}.attn.v"), h)?;
    let a = g.attention(q, k, v, heads)?;
    let a = nn::linear(g, store, &format!("{prefix}.attn.out"), a)?;
    let x = g.add(x, a)?;
    let h = nn::layer_norm(g, store, &format!("{prefix}.ln2"), x)?;
    let h = nn::linear(g, store, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = nn::linear(g, store, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}
