//! BCE training with AdamW and per-group learning rates.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{is_encoder_param, GsNet};
use crate::param::ParamStore;
use crate::tensor::{Element, Tensor};

/// Mask value excluded from the loss.
pub const UNLABELED: u8 = 255;

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
/// name and created on first use.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Element> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, steps: 0, moments: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    /// One update of every trainable parameter; a missing gradient counts as
    /// zero. Frozen parameters are not touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_for: impl Fn(&str) -> f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in store.iter_mut().filter(|p| p.trainable) {
            let lr = lr_for(&p.id);
            let (m, v) = self
                .moments
                .entry(p.id.clone())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let grad = p.grad.as_ref();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g.data()[i].to_f64_lossy());
                let mi = self.beta1 * m.data()[i].to_f64_lossy() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i].to_f64_lossy() + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = T::from_f64_lossy(mi);
                v.data_mut()[i] = T::from_f64_lossy(vi);
                let mut x = w.to_f64_lossy();
                x -= lr * self.weight_decay * x;
                x -= lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                *w = T::from_f64_lossy(x);
            }
        }
    }
}

/// One training image with its class-index mask (row-major `H×W`).
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Vec<u8>,
}

pub fn learning_rate(cfg: &TrainConfig, name: &str) -> f64 {
    if is_encoder_param(name) {
        cfg.lr_backbone
    } else {
        cfg.lr_head
    }
}

/// Forward, BCE, and backward over `batch`, accumulating the gradient of the
/// batch-mean loss, then one optimizer update. Returns the mean loss.
pub fn train_step(
    model: &GsNet,
    store: &mut ParamStore<f32>,
    opt: &mut AdamW<f32>,
    batch: &[&Sample],
    queries: &Tensor<f32>,
    cfg: &TrainConfig,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    let step = opt.steps as usize + 1;
    let non_finite = |detail: String| Error::NonFiniteLoss { step, detail };
    store.zero_grads();
    let mut total = 0.0f32;
    for s in batch {
        let mut g = Graph::new();
        let x = g.constant(s.image.clone())?;
        let q = g.constant(queries.clone())?;
        let out = model.forward(&mut g, store, x, q).map_err(|e| match e {
            Error::NonFinite { op } => non_finite(format!("forward produced non-finite values in {op}")),
            other => other,
        })?;
        let loss = g.bce_with_logits(out.logits, &s.mask, UNLABELED).map_err(|e| match e {
            Error::NonFinite { .. } => non_finite("loss evaluated to NaN or infinity".into()),
            other => other,
        })?;
        total += g.value(loss).data()[0];
        let scaled = g.scale(loss, 1.0 / batch.len() as f32)?;
        let grads = g.backward(scaled)?;
        g.accumulate_param_grads(&grads, store)?;
    }
    let mean = total / batch.len() as f32;
    if !mean.is_finite() {
        return Err(non_finite(format!("mean loss {mean}")));
    }
    opt.step(store, |name| learning_rate(cfg, name));
    Ok(mean)
}

/// Runs `cfg.iterations` steps with batches drawn by a seeded generator.
/// `on_step(iteration, loss)` is called after each step.
pub fn train(
    model: &GsNet,
    store: &mut ParamStore<f32>,
    samples: &[Sample],
    queries: &Tensor<f32>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    if samples.is_empty() {
        return Err(Error::Usage("no training samples".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::from_config(cfg);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch: Vec<&Sample> = (0..cfg.batch_size).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
        let loss = train_step(model, store, &mut opt, &batch, queries, cfg)?;
        on_step(it, loss);
        losses.push(loss);
    }
    Ok(losses)
}
