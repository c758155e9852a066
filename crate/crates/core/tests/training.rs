use gsnet::config::FreezePolicy;
use gsnet::data::synth::block_scene;
use gsnet::text::{embed_queries, HashProvider, PromptTemplate};
use gsnet::train::{train, AdamW, Sample, UNLABELED};
use gsnet::{Error, Graph, GsNet, ModelConfig, ParamStore, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bce(logits: &Tensor<f64>, mask: &[u8]) -> (f64, Tensor<f64>) {
    let mut g = Graph::new();
    let x = g.input(logits.clone()).unwrap();
    let l = g.bce_with_logits(x, mask, UNLABELED).unwrap();
    let grads = g.backward(l).unwrap();
    (g.value(l).data()[0], grads.wrt(x).unwrap().clone())
}

#[test]
fn bce_matches_explicit_sum_and_ignores_unlabeled() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (h, w, n) = (4, 5, 3);
        let logits = Tensor::from_fn(&[h, w, n], |_| rng.random_range(-6.0..6.0));
        let mask: Vec<u8> = (0..h * w).map(|_| if rng.random_bool(0.2) { UNLABELED } else { rng.random_range(0..n as u8) }).collect();
        let (mut total, mut count) = (0.0, 0usize);
        for (p, &t) in mask.iter().enumerate() {
            if t == UNLABELED {
                continue;
            }
            for c in 0..n {
                let z: f64 = logits.data()[p * n + c];
                let s = 1.0 / (1.0 + (-z).exp());
                let y = if c == t as usize { 1.0 } else { 0.0 };
                total -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
                count += 1;
            }
        }
        let (loss, grad) = bce(&logits, &mask);
        assert!((loss - total / count as f64).abs() < 1e-12);
        for (p, &t) in mask.iter().enumerate() {
            if t == UNLABELED {
                assert!(grad.data()[p * n..(p + 1) * n].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn bce_edge_cases() {
    let logits = Tensor::from_fn(&[2, 2, 3], |i| i as f64 - 5.0);
    let (loss, grad) = bce(&logits, &[UNLABELED; 4]);
    assert_eq!(loss, 0.0);
    assert!(grad.data().iter().all(|&v| v == 0.0));

    let mask = [0u8, 2, 1, 1];
    let confident = Tensor::from_fn(&[2, 2, 3], |i| if (i % 3) as u8 == mask[i / 3] { 60.0 } else { -60.0 });
    assert!(bce(&confident, &mask).0 < 1e-20);

    let mut g = Graph::new();
    let x = g.input(logits).unwrap();
    assert!(matches!(g.bce_with_logits(x, &[0, 3, 0, 0], UNLABELED), Err(Error::ClassIndex { index: 3, classes: 3 })));
}

/// Textbook AdamW on one scalar.
struct RefAdamW {
    m: f64,
    v: f64,
    t: i32,
}

impl RefAdamW {
    fn step(&mut self, x: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mhat = self.m / (1.0 - b1.powi(self.t));
        let vhat = self.v / (1.0 - b2.powi(self.t));
        x - lr * wd * x - lr * mhat / (vhat.sqrt() + eps)
    }
}

fn quadratic_run(wd: f64, steps: usize) -> (Vec<f64>, Vec<f64>) {
    let a = [1.0, 4.0, 0.25, 2.0];
    let c = [1.5, -2.0, 0.5, 3.0];
    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::zeros(&[4]));
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, wd);
    let mut reference = vec![0.0; 4];
    let mut refs: Vec<RefAdamW> = (0..4).map(|_| RefAdamW { m: 0.0, v: 0.0, t: 0 }).collect();
    for _ in 0..steps {
        let x = store.value("x").unwrap().data().to_vec();
        let grad = Tensor::from_fn(&[4], |i| a[i] * (x[i] - c[i]));
        store.get_mut("x").unwrap().grad = Some(grad);
        opt.step(&mut store, |_| 0.05);
        for i in 0..4 {
            let g = a[i] * (reference[i] - c[i]);
            reference[i] = refs[i].step(reference[i], g, 0.05, wd);
        }
    }
    (store.value("x").unwrap().data().to_vec(), reference)
}

#[test]
fn adamw_matches_reference_and_minimizes_quadratic() {
    for wd in [0.0, 0.01] {
        let (got, want) = quadratic_run(wd, 500);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
    let (got, _) = quadratic_run(0.0, 500);
    for (g, c) in got.iter().zip([1.5, -2.0, 0.5, 3.0]) {
        assert!((g - c).abs() < 1e-3, "{g} vs {c}");
    }
}

fn setup() -> (GsNet, Vec<Sample>, Tensor<f32>) {
    let mut cfg = ModelConfig::default();
    cfg.generalist.policy = FreezePolicy::Freeze;
    cfg.specialist.policy = FreezePolicy::Freeze;
    let model = GsNet::new(cfg).unwrap();
    let scene = block_scene(32, 8, 3, 0).unwrap();
    let names: Vec<String> = ["road", "tree", "water"].map(String::from).to_vec();
    let q = embed_queries(&names, &HashProvider::new(32, 0).unwrap(), &PromptTemplate::default()).unwrap();
    (model, vec![Sample { image: scene.image, mask: scene.mask.indices }], q.embeddings)
}

#[test]
fn short_run_is_reproducible_and_leaves_frozen_encoders_alone() {
    let (model, samples, q) = setup();
    let cfg = TrainConfig { iterations: 15, lr_head: 1e-3, ..TrainConfig::toy() };
    let run = || {
        let mut store: ParamStore<f32> = model.init_params();
        let losses = train(&model, &mut store, &samples, &q, &cfg, |_, _| {}).unwrap();
        (losses, store)
    };
    let (a, store) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    assert!(a.last().unwrap() < &a[0]);

    let fresh: ParamStore<f32> = model.init_params();
    for p in store.iter() {
        let changed = p.value != fresh.value(&p.id).unwrap().clone();
        if gsnet::model::is_encoder_param(&p.id) {
            assert!(!changed, "{} moved while frozen", p.id);
        }
    }
    assert!(store.iter().any(|p| p.value != fresh.value(&p.id).unwrap().clone()));
}
