//! Full network: two encoders, query-guided fusion, and the decoder.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::encoders::{FeaturePyramid, Stream, VisionEncoder};
use crate::error::{Error, Result};
use crate::param::{Initializer, ParamStore};
use crate::qgff::{Qgff, QgffOutput};
use crate::ripd::Ripd;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct GsNet {
    pub config: ModelConfig,
    pub generalist: VisionEncoder,
    pub specialist: VisionEncoder,
    pub qgff: Qgff,
    pub ripd: Ripd,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Raw per-query logits `[H, W, N]`.
    pub logits: Var,
    pub fusion: QgffOutput,
    pub generalist: FeaturePyramid,
    pub specialist: FeaturePyramid,
}

impl GsNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let generalist = VisionEncoder::new(Stream::Generalist, config.generalist.clone(), d, config.image_size);
        let specialist = VisionEncoder::new(Stream::Specialist, config.specialist.clone(), d, config.image_size);
        let qgff = Qgff { latent_dim: config.latent_dim };
        let ripd = Ripd {
            latent_dim: config.latent_dim,
            tap_dim: config.tap_dim,
            decoder_dim: config.decoder_dim,
            gn_groups: config.gn_groups,
            generalist_width: config.generalist.width,
            specialist_width: config.specialist.width,
            generalist_taps: config.generalist.taps,
            specialist_taps: config.specialist.taps,
        };
        Ok(GsNet { config, generalist, specialist, qgff, ripd })
    }

    /// Freshly initialized parameters from `config.seed`, with the configured
    /// freezing policies applied.
    pub fn init_params<T: Element>(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, self.config.seed);
        self.generalist.init_params(&mut init);
        self.specialist.init_params(&mut init);
        self.qgff.init_params(&mut init);
        self.ripd.init_params(&mut init);
        self.apply_policies(&mut store);
        store
    }

    /// Applies the per-stream policies; fusion and decoder stay trainable.
    pub fn apply_policies<T: Element>(&self, store: &mut ParamStore<T>) {
        store.set_trainable_where(|name| (!is_encoder_param(name)).then_some(true));
        self.generalist.apply_policy(store, self.config.generalist.policy);
        self.specialist.apply_policy(store, self.config.specialist.policy);
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        queries: Var,
    ) -> Result<ModelOutput> {
        let gen = self.generalist.forward(g, store, image)?;
        let spec = self.specialist.forward(g, store, image)?;
        self.forward_from_pyramids(g, store, gen, spec, queries)
    }

    /// Fusion and decoding on precomputed encoder outputs.
    pub fn forward_from_pyramids<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        gen: FeaturePyramid,
        spec: FeaturePyramid,
        queries: Var,
    ) -> Result<ModelOutput> {
        let fusion = self.qgff.forward(g, store, gen.final_features, spec.final_features, queries)?;
        let logits = self.ripd.predict(g, store, fusion.zf, &gen, &spec)?;
        Ok(ModelOutput { logits, fusion, generalist: gen, specialist: spec })
    }

    /// Logits `[H, W, N]` for `image [3, H, W]` and query embeddings `[N, D]`
    /// without recording gradients.
    pub fn infer(&self, store: &ParamStore<f32>, image: &Tensor<f32>, queries: &Tensor<f32>) -> Result<Tensor<f32>> {
        if queries.rank() != 2 || queries.shape()[1] != self.config.embed_dim {
            return Err(Error::shape(
                "infer",
                format!("queries {:?} must be [N, {}]", queries.shape(), self.config.embed_dim),
            ));
        }
        let mut g = Graph::inference();
        let x = g.constant(image.clone())?;
        let q = g.constant(queries.clone())?;
        let out = self.forward(&mut g, store, x, q)?;
        Ok(g.value(out.logits).clone())
    }
}

pub fn is_encoder_param(name: &str) -> bool {
    [Stream::Generalist, Stream::Specialist]
        .iter()
        .any(|s| name.strip_prefix(s.prefix()).is_some_and(|r| r.starts_with('.')))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FreezePolicy;

    #[test]
    fn toy_forward_shape_and_policies() {
        let net = GsNet::new(ModelConfig::default()).unwrap();
        let store = net.init_params::<f32>();
        let trainable_encoder = store.trainable().filter(|p| is_encoder_param(&p.id)).count();
        assert_eq!(trainable_encoder, 4 * net.config.generalist.depth);
        assert!(store.trainable().any(|p| p.id.starts_with("ripd.")));
        assert_eq!(net.config.specialist.policy, FreezePolicy::Freeze);

        let image = Tensor::from_fn(&[3, 64, 64], |i| ((i * 31 % 97) as f32) / 97.0);
        let q = Tensor::from_fn(&[3, 32], |i| ((i * 17 % 13) as f32) - 6.0);
        let a = net.infer(&store, &image, &q).unwrap();
        assert_eq!(a.shape(), &[64, 64, 3]);
        let b = net.infer(&store, &image, &q).unwrap();
        assert_eq!(a, b);
    }
}
