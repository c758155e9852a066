use gsnet::patch::{patch_inference, predict_labels, PatchPlan, Predictor, SegmentationModel};
use gsnet::{GsNet, ModelConfig, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Constant(Vec<f32>);

impl SegmentationModel for Constant {
    fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w, n) = (image.shape()[1], image.shape()[2], self.0.len());
        Ok(Tensor::from_fn(&[h, w, n], |i| self.0[i % n]))
    }
}

/// Depends on both pixel values and the position inside the tile, so
/// overlapping tiles disagree.
struct Positional;

impl SegmentationModel for Positional {
    fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        Ok(Tensor::from_fn(&[h, w, 2], |i| {
            let (p, n) = (i / 2, i % 2);
            let (y, x) = (p / w, p % w);
            image.at(&[n, y, x]) * (n as f32 + 1.0) + 0.01 * y as f32 - 0.02 * x as f32
        }))
    }
}

fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0))
}

#[test]
fn standard_plan_has_four_origins_and_128_pixel_overlap() {
    let plan = PatchPlan::standard();
    assert_eq!((plan.resize_to, plan.patch, plan.stride), (640, 384, 256));
    assert_eq!(plan.origins, vec![(0, 0), (0, 256), (256, 0), (256, 256)]);
    let cov = plan.coverage();
    let band = |v: usize| (256..384).contains(&v);
    for y in 0..640 {
        for x in 0..640 {
            let want = 1 << (band(y) as u32 + band(x) as u32);
            assert_eq!(cov[y * 640 + x], want, "({y}, {x})");
        }
    }
}

#[test]
fn constant_logits_survive_merging() {
    let model = Constant(vec![0.25, -1.5, 3.0]);
    for (plan, h, w) in [(PatchPlan::standard(), 640, 640), (PatchPlan::new(64, 32, 24).unwrap(), 50, 70)] {
        let out = patch_inference(&random_image(h, w, 1), &model, &plan).unwrap();
        assert_eq!(out.shape(), [h, w, 3]);
        for (i, v) in out.data().iter().enumerate() {
            assert!((v - model.0[i % 3]).abs() < 1e-6);
        }
    }
}

#[test]
fn merged_logits_match_coverage_average() {
    let plan = PatchPlan::new(64, 32, 20).unwrap();
    assert_eq!(plan.origins.len(), 9);
    let image = random_image(64, 64, 2);
    let got = patch_inference(&image, &Positional, &plan).unwrap();
    let mut sum = vec![0.0f64; 64 * 64 * 2];
    let mut count = vec![0u32; 64 * 64];
    for &(oy, ox) in &plan.origins {
        for y in 0..32 {
            for x in 0..32 {
                let (cy, cx) = (oy + y, ox + x);
                count[cy * 64 + cx] += 1;
                for n in 0..2 {
                    let v = image.at(&[n, cy, cx]) as f64 * (n as f64 + 1.0) + 0.01 * y as f64 - 0.02 * x as f64;
                    sum[(cy * 64 + cx) * 2 + n] += v;
                }
            }
        }
    }
    for (i, v) in got.data().iter().enumerate() {
        let want = sum[i] / count[i / 2] as f64;
        assert!((*v as f64 - want).abs() < 1e-6, "{i}: {v} vs {want}");
    }
}

#[test]
fn one_full_patch_equals_direct_inference() {
    let model = GsNet::new(ModelConfig::default()).unwrap();
    let store = model.init_params();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let queries = Tensor::from_fn(&[3, 32], |_| rng.random_range(-1.0..1.0));
    let predictor = Predictor { model: &model, store: &store, queries: queries.clone() };
    let image = random_image(64, 64, 4);
    let plan = PatchPlan::new(64, 64, 64).unwrap();
    assert_eq!(plan.origins, vec![(0, 0)]);
    assert_eq!(patch_inference(&image, &predictor, &plan).unwrap(), model.infer(&store, &image, &queries).unwrap());
}

#[test]
fn plans_must_cover_the_canvas() {
    assert!(PatchPlan::with_origins(64, 32, 32, vec![(0, 0), (0, 32), (32, 0)]).is_err());
    assert!(PatchPlan::with_origins(64, 32, 32, vec![(0, 0), (0, 32), (32, 0), (32, 40)]).is_err());
    assert!(PatchPlan::with_origins(64, 32, 32, vec![(0, 0), (0, 32), (32, 0), (32, 32)]).is_ok());
    for (r, p, s) in [(100, 30, 7), (97, 40, 40), (50, 50, 1)] {
        let plan = PatchPlan::new(r, p, s).unwrap();
        assert!(plan.coverage().iter().all(|&c| c >= 1));
        assert!(plan.origins.iter().all(|&(y, x)| y + p <= r && x + p <= r));
    }
}

#[test]
fn labels_are_first_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [1, 2, 7] {
        // Coarse values make ties common.
        let logits = Tensor::from_fn(&[6, 5, n], |_| rng.random_range(0..3) as f32);
        let mask = predict_labels(&logits).unwrap();
        for (p, &label) in mask.indices.iter().enumerate() {
            let px = &logits.data()[p * n..(p + 1) * n];
            let max = px.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(label as usize, px.iter().position(|&v| v == max).unwrap());
        }
    }
    assert!(predict_labels(&Tensor::zeros(&[1, 1, 255])).is_err());
}
