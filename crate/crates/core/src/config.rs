//! Model and training configuration, loaded from TOML with `key=value` overrides.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which encoder parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Nothing trainable.
    Freeze,
    /// Only the query and value attention projections (weights and biases).
    AttentionQv,
    Full,
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze" => Ok(FreezePolicy::Freeze),
            "attention_qv" => Ok(FreezePolicy::AttentionQv),
            "full" => Ok(FreezePolicy::Full),
            other => Err(Error::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_stride: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// 1-based block indices whose outputs feed the decoder, `[n1, n2]`.
    pub taps: [usize; 2],
    pub policy: FreezePolicy,
}

fn default_mlp_ratio() -> usize {
    4
}

impl EncoderConfig {
    pub fn generalist_toy() -> Self {
        EncoderConfig {
            patch_stride: 16,
            depth: 8,
            width: 32,
            heads: 4,
            mlp_ratio: 4,
            taps: [4, 8],
            policy: FreezePolicy::AttentionQv,
        }
    }

    pub fn specialist_toy() -> Self {
        EncoderConfig { patch_stride: 8, policy: FreezePolicy::Freeze, ..Self::generalist_toy() }
    }

    fn validate(&self, name: &str, expected_stride: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{name}: {msg}")));
        if self.patch_stride != expected_stride {
            return fail(format!("patch_stride must be {expected_stride}, got {}", self.patch_stride));
        }
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("depth, width, heads and mlp_ratio must be positive".into());
        }
        if self.width % self.heads != 0 {
            return fail(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.taps.iter().any(|&t| t == 0 || t > self.depth) {
            return fail(format!("taps {:?} must lie in 1..={}", self.taps, self.depth));
        }
        Ok(())
    }
}

/// Overlapping-patch inference geometry: resize to `canvas`², tile with
/// `size`² patches whose origins advance by `stride`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub canvas: usize,
    pub size: usize,
    pub stride: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { canvas: 640, size: 384, stride: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate for trainable generalist parameters.
    pub lr_backbone: f64,
    /// Learning rate for the fusion and decoder heads.
    pub lr_head: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_backbone: 2e-6,
            lr_head: 2e-4,
            iterations: 30_000,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig { iterations: 200, batch_size: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_backbone > 0.0 && self.lr_head > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Native square input size; larger images go through patch inference.
    pub image_size: usize,
    /// Query embedding width, shared by both encoder outputs.
    pub embed_dim: usize,
    /// Channels of the embedded cost volumes.
    pub latent_dim: usize,
    /// Channels of each projected encoder tap.
    pub tap_dim: usize,
    pub decoder_dim: usize,
    pub gn_groups: usize,
    pub seed: u64,
    pub generalist: EncoderConfig,
    pub specialist: EncoderConfig,
    pub patch: PatchConfig,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            embed_dim: 32,
            latent_dim: 64,
            tap_dim: 8,
            decoder_dim: 32,
            gn_groups: 8,
            seed: 0,
            generalist: EncoderConfig::generalist_toy(),
            specialist: EncoderConfig::specialist_toy(),
            patch: PatchConfig::default(),
            train: TrainConfig::toy(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generalist.validate("generalist", 16)?;
        self.specialist.validate("specialist", 8)?;
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 16", self.image_size)));
        }
        if [self.embed_dim, self.latent_dim, self.tap_dim, self.decoder_dim].contains(&0) {
            return Err(Error::Config("embed_dim, latent_dim, tap_dim and decoder_dim must be positive".into()));
        }
        if self.gn_groups == 0 || self.decoder_dim % self.gn_groups != 0 {
            return Err(Error::Config(format!(
                "decoder_dim {} not divisible by gn_groups {}",
                self.decoder_dim, self.gn_groups
            )));
        }
        let p = &self.patch;
        if p.size == 0 || p.size > p.canvas || p.stride == 0 || p.size % 16 != 0 {
            return Err(Error::Config(format!("invalid patch geometry {p:?}")));
        }
        self.train.validate()
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: ModelConfig = table.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies `a.b.c=value`; the value is parsed as TOML, falling back to a string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{spec}`")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn training_defaults() {
        let t = TrainConfig::default();
        assert_eq!((t.lr_backbone, t.lr_head, t.iterations, t.batch_size), (2e-6, 2e-4, 30_000, 4));
        assert_eq!(PatchConfig::default(), PatchConfig { canvas: 640, size: 384, stride: 256 });
        assert_eq!(EncoderConfig::generalist_toy().taps, [4, 8]);
    }

    #[test]
    fn overrides_apply_nested_keys() {
        let text = ModelConfig::default().to_toml();
        let cfg = ModelConfig::from_toml(
            &text,
            &["generalist.depth=4".into(), "generalist.taps=[2,4]".into(), "specialist.policy=full".into()],
        )
        .unwrap();
        assert_eq!(cfg.generalist.depth, 4);
        assert_eq!(cfg.generalist.taps, [2, 4]);
        assert_eq!(cfg.specialist.policy, FreezePolicy::Full);
        assert!(ModelConfig::from_toml(&text, &["nonsense".into()]).is_err());
        assert!(ModelConfig::from_toml(&text, &["generalist.policy=partial".into()]).is_err());
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut cfg = ModelConfig::default();
        cfg.generalist.taps = [4, 9];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.image_size = 40;
        assert!(cfg.validate().is_err());
        assert!(matches!("bogus".parse::<FreezePolicy>(), Err(Error::UnknownPolicy(_))));
    }
}
