use std::collections::BTreeMap;
use std::path::Path;

use gsnet::checkpoint::Checkpoint;
use gsnet::data::SegmentationMask;
use gsnet::patch::{patch_inference, predict_labels, PatchPlan, Predictor};
use gsnet::tensor::resize;
use gsnet::text::{embed_queries, EmbeddingProvider, FileProvider, HashProvider, QuerySet};
use gsnet::{GsNet, ModelConfig, ParamStore, PromptTemplate, Tensor};

use crate::{CliError, CliResult, ConfigArgs};

/// Seed of the hashed prompt embeddings; fixed so that training and
/// inference agree on the query vectors.
pub const HASH_SEED: u64 = 0;

pub const META_CONFIG: &str = "config";
pub const META_CLASSES: &str = "classes";
pub const META_PROVIDER: &str = "provider";

pub fn ensure_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} `{}` does not exist", path.display())))
    }
}

/// The config file (or defaults) with overrides, then `seed`/`iters` on top.
pub fn load_config(args: &ConfigArgs, seed: Option<u64>, iters: Option<usize>) -> CliResult<ModelConfig> {
    let text = match &args.config {
        Some(p) => {
            require_file(p, "config")?;
            std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let mut cfg = ModelConfig::from_toml(&text, &args.overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(n) = iters {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn provider(cfg: &ModelConfig, embeddings: Option<&Path>) -> CliResult<Box<dyn EmbeddingProvider>> {
    let p: Box<dyn EmbeddingProvider> = match embeddings {
        Some(path) => {
            require_file(path, "embedding file")?;
            Box::new(FileProvider::load(path)?)
        }
        None => Box::new(HashProvider::new(cfg.embed_dim, HASH_SEED)?),
    };
    if p.dim() != cfg.embed_dim {
        return Err(CliError::usage(format!("embeddings have dim {}, model expects {}", p.dim(), cfg.embed_dim)));
    }
    Ok(p)
}

pub fn queries(cfg: &ModelConfig, classes: &[String], embeddings: Option<&Path>) -> CliResult<QuerySet> {
    let p = provider(cfg, embeddings)?;
    Ok(embed_queries(classes, p.as_ref(), &PromptTemplate::default())?)
}

pub struct Loaded {
    pub model: GsNet,
    pub store: ParamStore<f32>,
    pub metadata: BTreeMap<String, String>,
}

/// Rebuilds the network from the config stored in a checkpoint; command-line
/// overrides apply on top of it.
pub fn load_checkpoint(path: &Path, args: &ConfigArgs) -> CliResult<Loaded> {
    require_file(path, "checkpoint")?;
    let ck = Checkpoint::<f32>::load(path)?;
    let stored = ck
        .metadata
        .get(META_CONFIG)
        .ok_or_else(|| CliError::usage(format!("{}: checkpoint has no `{META_CONFIG}` entry", path.display())))?;
    let mut cfg = ModelConfig::from_toml(stored, &args.overrides)?;
    if let Some(p) = &args.config {
        // An explicit config replaces the stored one wholesale.
        require_file(p, "config")?;
        cfg = ModelConfig::load(p, &args.overrides)?;
    }
    let model = GsNet::new(cfg)?;
    let mut store = model.init_params();
    let report = ck.apply_to(&mut store)?;
    if !report.missing.is_empty() {
        return Err(CliError::usage(format!(
            "{}: checkpoint lacks {} parameters (first: {})",
            path.display(),
            report.missing.len(),
            report.missing[0]
        )));
    }
    Ok(Loaded { model, store, metadata: ck.metadata })
}

/// Logits `[H, W, N]` at the image's own resolution. Images that fit the
/// native size on the 16-pixel grid run directly; anything else goes through
/// the configured patch plan.
pub fn predict(loaded: &Loaded, image: &Tensor<f32>, queries: &Tensor<f32>) -> CliResult<Tensor<f32>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let native = loaded.model.config.image_size;
    if h <= native && w <= native && h % 16 == 0 && w % 16 == 0 {
        return Ok(loaded.model.infer(&loaded.store, image, queries)?);
    }
    let p = &loaded.model.config.patch;
    let plan = PatchPlan::new(p.canvas, p.size, p.stride)?;
    let predictor = Predictor { model: &loaded.model, store: &loaded.store, queries: queries.clone() };
    Ok(patch_inference(image, &predictor, &plan)?)
}

pub fn predict_mask(loaded: &Loaded, image: &Tensor<f32>, queries: &Tensor<f32>) -> CliResult<SegmentationMask> {
    Ok(predict_labels(&predict(loaded, image, queries)?)?)
}

/// Image and mask resampled to `size×size` (bilinear / nearest).
pub fn to_training_size(image: &Tensor<f32>, mask: &SegmentationMask, size: usize) -> CliResult<(Tensor<f32>, Vec<u8>)> {
    let img = resize::bilinear_resize(image, size, size)?;
    let labels = resize::nearest_resize_labels(&mask.indices, mask.height, mask.width, size, size);
    Ok((img, labels))
}
