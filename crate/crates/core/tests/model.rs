use std::collections::BTreeMap;

use gsnet::encoders::{transformer_block, init_block, FeaturePyramid, Stream, VisionEncoder};
use gsnet::param::Initializer;
use gsnet::qgff::{compute_cost_volume, embed_cost_volume, fuse};
use gsnet::ripd::agr;
use gsnet::{Graph, GsNet, ModelConfig, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform<T: gsnet::Element>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::<f64>::from_fn(shape, |_| rng.random_range(lo..hi)).cast()
}

fn toy() -> (GsNet, ParamStore<f32>) {
    let model = GsNet::new(ModelConfig::default()).unwrap();
    let store = model.init_params();
    (model, store)
}

fn cost(e: &Tensor<f64>, q: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::inference();
    let (e, q) = (g.constant(e.clone()).unwrap(), g.constant(q.clone()).unwrap());
    let c = compute_cost_volume(&mut g, e, q).unwrap();
    g.value(c).clone()
}

#[test]
fn encoder_grids_for_every_extent() {
    let cfg = ModelConfig::default();
    let gen = VisionEncoder::new(Stream::Generalist, cfg.generalist.clone(), cfg.embed_dim, cfg.image_size);
    let spec = VisionEncoder::new(Stream::Specialist, cfg.specialist.clone(), cfg.embed_dim, cfg.image_size);
    let mut store = ParamStore::<f32>::new();
    gen.init_params(&mut Initializer::new(&mut store, 0));
    spec.init_params(&mut Initializer::new(&mut store, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for h in [16, 32, 48, 64] {
        for w in [16, 32, 48, 64] {
            let mut g = Graph::inference();
            let x = g.constant(uniform(&[3, h, w], 0.0, 1.0, &mut rng)).unwrap();
            let pg = gen.forward(&mut g, &store, x).unwrap();
            let ps = spec.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(pg.final_features), [h / 16, w / 16, cfg.embed_dim]);
            assert_eq!(g.shape(ps.final_features), [h / 16, w / 16, cfg.embed_dim]);
            for l in cfg.generalist.taps {
                assert_eq!(g.shape(pg.tap(l).unwrap()), [h / 16, w / 16, cfg.generalist.width]);
            }
            for l in cfg.specialist.taps {
                assert_eq!(g.shape(ps.tap(l).unwrap()), [h / 8, w / 8, cfg.specialist.width]);
            }
        }
    }
}

#[test]
fn featureless_patches_give_spatially_constant_features() {
    // Zero patch embedding and positions make every spatial token identical,
    // and attention keeps identical tokens identical.
    let cfg = ModelConfig::default();
    for (stream, enc_cfg) in [(Stream::Generalist, cfg.generalist.clone()), (Stream::Specialist, cfg.specialist.clone())] {
        let enc = VisionEncoder::new(stream, enc_cfg, cfg.embed_dim, 64);
        let mut store = ParamStore::<f64>::new();
        enc.init_params(&mut Initializer::new(&mut store, 3));
        for name in ["patch_embed.weight", "patch_embed.bias", "pos_embed"] {
            let p = store.get_mut(&format!("{}.{name}", stream.prefix())).unwrap();
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::inference();
        let x = g.constant(uniform(&[3, 64, 48], 0.0, 1.0, &mut rng)).unwrap();
        let out = enc.forward(&mut g, &store, x).unwrap();
        let f = g.value(out.final_features);
        let d = f.shape()[2];
        let first = &f.data()[..d];
        for px in f.data().chunks(d) {
            for (a, b) in px.iter().zip(first) {
                assert!((a - b).abs() < 1e-12, "{stream:?}");
            }
        }
    }
}

#[test]
fn block_with_zeroed_output_projections_is_identity() {
    let mut store = ParamStore::<f64>::new();
    init_block(&mut Initializer::new(&mut store, 5), "b", 16, 4);
    for name in ["b.attn.out.weight", "b.attn.out.bias", "b.mlp.fc2.weight", "b.mlp.fc2.bias"] {
        let p = store.get_mut(name).unwrap();
        p.value = Tensor::zeros(p.value.shape());
    }
    let x = uniform::<f64>(&[7, 16], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(6));
    let mut g = Graph::inference();
    let v = g.constant(x.clone()).unwrap();
    let y = transformer_block(&mut g, &store, "b", v, 4).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn cost_volume_matches_cosine_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..50 {
        let (h, w, d, n) = (1 + case % 4, 2 + case % 3, 4 + case % 13, 1 + case % 5);
        let e = uniform::<f64>(&[h, w, d], -1.0, 1.0, &mut rng);
        let q = uniform::<f64>(&[n, d], -1.0, 1.0, &mut rng);
        let got = cost(&e, &q);
        for y in 0..h {
            for x in 0..w {
                for k in 0..n {
                    let (mut dot, mut ne, mut nq) = (0.0, 0.0, 0.0);
                    for c in 0..d {
                        let (a, b) = (e.at(&[y, x, c]), q.at(&[k, c]));
                        dot += a * b;
                        ne += a * a;
                        nq += b * b;
                    }
                    let want = dot / (ne.sqrt() * nq.sqrt());
                    let v = got.at(&[y, x, k]);
                    assert!((v - want).abs() < 1e-12);
                    assert!((-1.0..=1.0).contains(&v));
                }
            }
        }
    }
}

#[test]
fn cost_volume_ignores_positive_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e = uniform::<f32>(&[4, 4, 16], -1.0, 1.0, &mut rng);
    let q = uniform::<f32>(&[5, 16], -1.0, 1.0, &mut rng);
    let mut g = Graph::<f32>::inference();
    let base = {
        let (ev, qv) = (g.constant(e.clone()).unwrap(), g.constant(q.clone()).unwrap());
        let c = compute_cost_volume(&mut g, ev, qv).unwrap();
        g.value(c).clone()
    };
    for a in [0.1f32, 1.0, 10.0] {
        for b in [0.1f32, 1.0, 10.0] {
            let ev = g.constant(e.map(|v| v * a)).unwrap();
            let qv = g.constant(q.map(|v| v * b)).unwrap();
            let c = compute_cost_volume(&mut g, ev, qv).unwrap();
            assert!(g.value(c).max_abs_diff(&base) < 1e-6, "alpha {a} beta {b}");
        }
    }
}

#[test]
fn zeroing_one_query_slice_changes_only_that_query() {
    let mut store = ParamStore::<f64>::new();
    Initializer::new(&mut store, 9).conv("e", 1, 16, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = uniform::<f64>(&[4, 4, 5], -1.0, 1.0, &mut rng);
    let embed = |m: &Tensor<f64>| {
        let mut g = Graph::inference();
        let v = g.constant(m.clone()).unwrap();
        let z = embed_cost_volume(&mut g, &store, "e", v).unwrap();
        g.value(z).clone()
    };
    let base = embed(&m);
    assert_eq!(base.shape(), [5, 16, 4, 4]);
    for n in 0..5 {
        let mut mz = m.clone();
        for p in 0..16 {
            mz.data_mut()[p * 5 + n] = 0.0;
        }
        let z = embed(&mz);
        for k in 0..5 {
            let block = 16 * 16;
            let same = z.data()[k * block..(k + 1) * block] == base.data()[k * block..(k + 1) * block];
            assert_eq!(same, k != n, "query {n}, slice {k}");
        }
    }
}

#[test]
fn fused_residual_stays_in_open_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..50 {
        let mut store = ParamStore::<f64>::new();
        Initializer::new(&mut store, seed).conv("f", 8, 4, 7);
        for p in store.iter_mut() {
            p.value = uniform(p.value.shape(), -1.0, 1.0, &mut rng);
        }
        let mut g = Graph::inference();
        let zg = g.constant(uniform(&[3, 4, 5, 5], 0.0, 1.0, &mut rng)).unwrap();
        let zs = g.constant(uniform(&[3, 4, 5, 5], 0.0, 1.0, &mut rng)).unwrap();
        let zf = fuse(&mut g, &store, "f", zg, zs).unwrap();
        for (f, z) in g.value(zf).data().iter().zip(g.value(zg).data()) {
            let r = f - z;
            assert!(r > 0.0 && r < 1.0, "residual {r}");
        }
    }
}

#[test]
fn agr_is_nonnegative_and_kills_constants() {
    let mut store = ParamStore::<f64>::new();
    {
        let mut init = Initializer::new(&mut store, 12);
        init.conv("a.conv", 3, 8, 3);
        init.norm("a.gn", 8);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = Graph::inference();
    let x = g.constant(uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng)).unwrap();
    let y = agr(&mut g, &store, "a", x, 4).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v >= 0.0));

    // A conv with zero weights and one shared bias feeds the norm a constant.
    store.get_mut("a.conv.weight").unwrap().value = Tensor::zeros(&[8, 3, 3, 3]);
    store.get_mut("a.conv.bias").unwrap().value = Tensor::full(&[8], 0.7);
    let mut g = Graph::inference();
    let x = g.constant(uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng)).unwrap();
    let y = agr(&mut g, &store, "a", x, 4).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-10));
}

#[test]
fn logits_shape_for_every_extent_and_vocabulary() {
    let (model, store) = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for h in [32, 48, 64] {
        for w in [32, 48, 64] {
            let image = uniform(&[3, h, w], 0.0, 1.0, &mut rng);
            for n in [1, 2, 5] {
                let q = uniform(&[n, 32], -1.0, 1.0, &mut rng);
                assert_eq!(model.infer(&store, &image, &q).unwrap().shape(), [h, w, n]);
            }
        }
    }
}

#[test]
fn logits_permute_with_queries() {
    let (model, store) = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let image = uniform(&[3, 32, 48], 0.0, 1.0, &mut rng);
    let q = uniform::<f32>(&[5, 32], -1.0, 1.0, &mut rng);
    let base = model.infer(&store, &image, &q).unwrap();
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let qp = Tensor::from_fn(&[5, 32], |i| q.at(&[perm[i / 32], i % 32]));
        let out = model.infer(&store, &image, &qp).unwrap();
        for p in 0..32 * 48 {
            for (k, &src) in perm.iter().enumerate() {
                assert!((out.data()[p * 5 + k] - base.data()[p * 5 + src]).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn identical_calls_are_bitwise_equal() {
    let (model, store) = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let image = uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
    let q = uniform(&[3, 32], -1.0, 1.0, &mut rng);
    let a = model.infer(&store, &image, &q).unwrap();
    assert_eq!(a.shape(), [64, 64, 3]);
    assert_eq!(a, model.infer(&store, &image, &q).unwrap());
}

/// Pyramids whose final features are a fixed linear map of 16×16 patch means
/// and whose taps are fixed, standing in for the encoders.
fn stub_pyramids(g: &mut Graph<f64>, model: &GsNet, image: &Tensor<f64>, taps: &[Tensor<f64>; 4]) -> (FeaturePyramid, FeaturePyramid) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (gh, gw, d) = (h / 16, w / 16, model.config.embed_dim);
    let mut feats = Tensor::zeros(&[gh, gw, d]);
    for y in 0..gh {
        for x in 0..gw {
            for c in 0..3 {
                let mut mean = 0.0;
                for dy in 0..16 {
                    for dx in 0..16 {
                        mean += image.at(&[c, y * 16 + dy, x * 16 + dx]) / 256.0;
                    }
                }
                for k in 0..d {
                    let v = feats.at(&[y, x, k]) + mean * ((c * 7 + k * 3) % 5) as f64;
                    feats.set(&[y, x, k], v);
                }
            }
        }
    }
    let f = g.constant(feats).unwrap();
    let cfg = &model.config;
    let mut gen = FeaturePyramid { final_features: f, taps: BTreeMap::new() };
    let mut spec = FeaturePyramid { final_features: f, taps: BTreeMap::new() };
    for (i, l) in cfg.generalist.taps.iter().enumerate() {
        gen.taps.insert(*l, g.constant(taps[i].clone()).unwrap());
    }
    for (i, l) in cfg.specialist.taps.iter().enumerate() {
        spec.taps.insert(*l, g.constant(taps[2 + i].clone()).unwrap());
    }
    (gen, spec)
}

fn stub_taps(model: &GsNet, h: usize, w: usize, rng: &mut ChaCha8Rng) -> [Tensor<f64>; 4] {
    let (cg, cs) = (model.config.generalist.width, model.config.specialist.width);
    [
        uniform(&[h / 16, w / 16, cg], -1.0, 1.0, rng),
        uniform(&[h / 16, w / 16, cg], -1.0, 1.0, rng),
        uniform(&[h / 8, w / 8, cs], -1.0, 1.0, rng),
        uniform(&[h / 8, w / 8, cs], -1.0, 1.0, rng),
    ]
}

fn stub_logits(model: &GsNet, store: &ParamStore<f64>, image: &Tensor<f64>, q: &Tensor<f64>, taps: &[Tensor<f64>; 4]) -> Tensor<f64> {
    let mut g = Graph::inference();
    let (gen, spec) = stub_pyramids(&mut g, model, image, taps);
    let qv = g.constant(q.clone()).unwrap();
    let out = model.forward_from_pyramids(&mut g, store, gen, spec, qv).unwrap();
    g.value(out.logits).clone()
}

#[test]
fn brightness_only_matters_through_encoders() {
    let model = GsNet::new(ModelConfig::default()).unwrap();
    let store: ParamStore<f64> = model.init_params();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let image = uniform(&[3, 32, 48], 0.05, 0.5, &mut rng);
    let q = uniform(&[3, 32], -1.0, 1.0, &mut rng);
    let taps = stub_taps(&model, 32, 48, &mut rng);
    let base = stub_logits(&model, &store, &image, &q, &taps);
    let bright = stub_logits(&model, &store, &image.map(|v| 2.0 * v), &q, &taps);
    assert!(base.max_abs_diff(&bright) < 1e-9);

    // The real encoders are nonlinear in the input, so brightness does matter there.
    let f32_store: ParamStore<f32> = model.init_params();
    let img32: Tensor<f32> = image.cast();
    let a = model.infer(&f32_store, &img32, &q.cast()).unwrap();
    let b = model.infer(&f32_store, &img32.map(|v| 2.0 * v), &q.cast()).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn every_tap_feeds_the_logits() {
    let model = GsNet::new(ModelConfig::default()).unwrap();
    let store: ParamStore<f64> = model.init_params();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let image = uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    let q = uniform(&[2, 32], -1.0, 1.0, &mut rng);
    let taps = stub_taps(&model, 32, 32, &mut rng);
    let base = stub_logits(&model, &store, &image, &q, &taps);
    for i in 0..4 {
        let mut t = taps.clone();
        t[i] = Tensor::zeros(t[i].shape());
        assert!(stub_logits(&model, &store, &image, &q, &t).max_abs_diff(&base) > 1e-9, "tap {i}");
    }
}

#[test]
fn mismatched_tap_grids_are_rejected() {
    let model = GsNet::new(ModelConfig::default()).unwrap();
    let store: ParamStore<f64> = model.init_params();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let image = uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    let mut taps = stub_taps(&model, 32, 32, &mut rng);
    taps[2] = uniform(&[2, 2, model.config.specialist.width], -1.0, 1.0, &mut rng);
    let mut g = Graph::inference();
    let (gen, spec) = stub_pyramids(&mut g, &model, &image, &taps);
    let qv = g.constant(uniform(&[2, 32], -1.0, 1.0, &mut rng)).unwrap();
    assert!(model.forward_from_pyramids(&mut g, &store, gen, spec, qv).is_err());
}
