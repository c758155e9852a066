//! Central finite-difference checks of reverse-mode gradients (64-bit).
//!
//! A graph output `y = f(x_1, .., x_k)` is reduced to the scalar `⟨r, y⟩`
//! with a fixed random projection `r`. Its analytic gradient comes from
//! [`Graph::backward_with`]; the numeric gradient perturbs one coordinate at
//! a time by `±h`. The reported error for an input is the norm-wise relative
//! error `‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖)` over the checked coordinates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::config::ModelConfig;
use crate::model::GsNet;
use crate::param::{Initializer, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per input; inputs at most this large are checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
    /// Also difference with step `h/2` and skip coordinates where the two
    /// estimates disagree, which happens when a ReLU input crosses zero
    /// inside the stencil.
    pub kink_guard: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_coords: 64, seed: 0, kink_guard: false }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub coords: usize,
    /// Coordinates dropped by the kink guard.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|c| c.skipped).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Norm-wise relative error; two vanishing vectors compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-10 {
        return if diff < 1e-10 { 0.0 } else { f64::INFINITY };
    }
    diff / scale
}

/// Checks `build` against central differences for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = xs.iter().map(|x| g.input(x.clone())).collect::<Result<Vec<_>>>()?;
        let y = build(&mut g, &vars)?;
        Ok((g, vars, y))
    };

    let (g, vars, y) = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let proj = Tensor::from_fn(g.shape(y), |_| rng.random_range(-1.0..1.0));
    let grads = g.backward_with(y, proj.clone())?;
    let objective = |xs: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, y) = eval(xs)?;
        g.value(y).dot(&proj)
    };

    let mut report = GradCheckReport { inputs: Vec::with_capacity(inputs.len()) };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let analytic_full = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        let mut skipped = 0;
        for &c in &coords {
            let orig = work[k].data()[c];
            let mut central = |h: f64| -> Result<f64> {
                work[k].data_mut()[c] = orig + h;
                let plus = objective(&work)?;
                work[k].data_mut()[c] = orig - h;
                let minus = objective(&work)?;
                work[k].data_mut()[c] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let d = central(opts.step)?;
            if opts.kink_guard {
                let half = central(opts.step / 2.0)?;
                if (d - half).abs() > 1e-7 + 1e-6 * d.abs() {
                    skipped += 1;
                    continue;
                }
            }
            numeric.push(d);
            analytic.push(analytic_full.data()[c]);
        }
        let max_abs_error = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        report.inputs.push(InputCheck {
            rel_error: relative_error(&analytic, &numeric),
            max_abs_error,
            coords: numeric.len(),
            skipped,
        });
    }
    if report.inputs.is_empty() {
        return Err(Error::Usage("gradient check without inputs".into()));
    }
    Ok(report)
}

/// Tolerance for single operations and small composite layers.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the assembled network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Worst result of one named check over several random trials.
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Coordinates dropped by the kink guard, summed over trials.
    pub skipped: usize,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub(crate) fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform in `[-1, -0.05] ∪ [0.05, 1]`, keeping finite differences off the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn shapes(list: &'static [&'static [usize]]) -> Inputs {
    Box::new(move |rng| list.iter().map(|s| uniform(s, -1.0, 1.0, rng)).collect())
}

fn op_cases() -> Vec<(&'static str, Inputs, Build)> {
    let bce_targets: Vec<u8> = (0..16).map(|i| if i % 5 == 3 { 255 } else { (i % 2) as u8 }).collect();
    vec![
        ("add", shapes(&[&[3, 4], &[3, 4]]), Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", shapes(&[&[3, 4], &[3, 4]]), Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", shapes(&[&[3, 4]]), Box::new(|g, v| g.scale(v[0], 2.5))),
        ("relu", Box::new(|rng| vec![off_kink(&[4, 5], rng)]), Box::new(|g, v| g.relu(v[0]))),
        ("sigmoid", shapes(&[&[4, 5]]), Box::new(|g, v| g.sigmoid(v[0]))),
        ("gelu", shapes(&[&[4, 5]]), Box::new(|g, v| g.gelu(v[0]))),
        ("l2_normalize", shapes(&[&[4, 5]]), Box::new(|g, v| g.l2_normalize(v[0], 1e-12))),
        ("softmax", shapes(&[&[3, 5]]), Box::new(|g, v| g.softmax(v[0]))),
        ("matmul", shapes(&[&[2, 3, 4], &[2, 4, 5]]), Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_shared", shapes(&[&[2, 3, 4], &[4, 5]]), Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("linear", shapes(&[&[2, 3, 4], &[4, 5], &[5]]), Box::new(|g, v| g.linear(v[0], v[1], v[2]))),
        (
            "conv2d_3x3",
            shapes(&[&[2, 3, 5, 6], &[4, 3, 3, 3], &[4]]),
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
        ),
        (
            "conv2d_2x2_stride2",
            shapes(&[&[1, 2, 6, 4], &[3, 2, 2, 2], &[3]]),
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 0)),
        ),
        (
            "conv2d_7x7",
            shapes(&[&[3, 1, 4, 4], &[2, 1, 7, 7], &[2]]),
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 3)),
        ),
        (
            "deconv2d",
            shapes(&[&[2, 3, 3, 2], &[3, 2, 2, 2], &[2]]),
            Box::new(|g, v| g.deconv2d(v[0], v[1], v[2], 2, 2)),
        ),
        (
            "group_norm",
            shapes(&[&[2, 4, 3, 3], &[4], &[4]]),
            Box::new(|g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5)),
        ),
        ("layer_norm", shapes(&[&[5, 6], &[6], &[6]]), Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("bilinear_resize", shapes(&[&[2, 3, 4, 5]]), Box::new(|g, v| g.bilinear_resize(v[0], 7, 3))),
        ("permute", shapes(&[&[2, 3, 4]]), Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("reshape", shapes(&[&[2, 6]]), Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("concat", shapes(&[&[2, 3], &[2, 2]]), Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("slice", shapes(&[&[4, 5]]), Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
        ("repeat_batch", shapes(&[&[1, 3, 2]]), Box::new(|g, v| g.repeat_batch(v[0], 3))),
        ("attention", shapes(&[&[5, 8], &[5, 8], &[5, 8]]), Box::new(|g, v| g.attention(v[0], v[1], v[2], 2))),
        ("sum", shapes(&[&[3, 4]]), Box::new(|g, v| g.sum(v[0]))),
        (
            "bce_with_logits",
            Box::new(|rng| vec![uniform(&[4, 4, 2], -3.0, 3.0, rng)]),
            Box::new(move |g, v| g.bce_with_logits(v[0], &bce_targets, 255)),
        ),
    ]
}

/// Checks every differentiable graph operation over `trials` random draws.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let opts = GradCheckOptions::default();
    let mut rows = Vec::new();
    for (k, (name, inputs, build)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 1_000_003));
        let mut worst: f64 = 0.0;
        for t in 0..trials {
            let xs = inputs(&mut rng);
            let report = check_gradients(&xs, &build, &GradCheckOptions { seed: seed + t as u64, ..opts.clone() })?;
            worst = worst.max(report.max_rel_error());
        }
        rows.push(SuiteRow { name: name.to_string(), trials, max_rel_error: worst, tolerance: OP_TOLERANCE, skipped: 0 });
    }
    Ok(rows)
}

/// Gradient check of `build` with respect to the named parameters of `store`
/// plus any extra inputs. Parameters are fed as graph inputs and bound by
/// name, so `build` reads them through `Graph::param` as usual.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    names: &[&str],
    extra: &[Tensor<f64>],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut inputs: Vec<Tensor<f64>> = extra.to_vec();
    for n in names {
        inputs.push(store.value(n)?.clone());
    }
    check_gradients(
        &inputs,
        |g, vars| {
            for (n, &v) in names.iter().zip(&vars[extra.len()..]) {
                g.bind_param(n, v)?;
            }
            build(g, &vars[..extra.len()])
        },
        opts,
    )
}

fn randomized_store(build: impl FnOnce(&mut Initializer<'_, f64>), seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    build(&mut Initializer::new(&mut store, seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in store.iter_mut() {
        p.value = uniform(p.value.shape(), -0.5, 0.5, &mut rng);
    }
    store
}

fn layer_row<F>(name: &str, trials: usize, seed: u64, mut one: F) -> Result<SuiteRow>
where
    F: FnMut(u64) -> Result<GradCheckReport>,
{
    let (mut worst, mut skipped) = (0.0f64, 0);
    for t in 0..trials {
        let report = one(seed.wrapping_add(t as u64))?;
        worst = worst.max(report.max_rel_error());
        skipped += report.skipped();
    }
    Ok(SuiteRow { name: name.to_string(), trials, max_rel_error: worst, tolerance: OP_TOLERANCE, skipped })
}

/// Checks the composite layers with respect to their inputs and parameters,
/// with parameters redrawn uniformly so that no term is negligible.
pub fn layer_suite(trials: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let opts = |s: u64| GradCheckOptions { seed: s, kink_guard: true, ..GradCheckOptions::default() };
    let mut rows = Vec::new();

    rows.push(layer_row("transformer_block", trials, seed, |s| {
        let store = randomized_store(|i| crate::encoders::init_block(i, "b", 8, 2), s);
        // Softmax ignores the per-query constant `q·b_k`, so the key bias has
        // an exactly zero gradient and is left out.
        let names: Vec<&str> = store.names().filter(|n| *n != "b.attn.k.bias").collect();
        let x = uniform(&[5, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(s));
        check_params(&store, &names, &[x], |g, v| crate::encoders::transformer_block(g, &store, "b", v[0], 2), &opts(s))
    })?);

    rows.push(layer_row("agr", trials, seed, |s| {
        let store = randomized_store(
            |i| {
                i.conv("a.conv", 3, 4, 3);
                i.norm("a.gn", 4);
            },
            s,
        );
        let names: Vec<&str> = store.names().collect();
        let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(s));
        check_params(&store, &names, &[x], |g, v| crate::ripd::agr(g, &store, "a", v[0], 2), &opts(s))
    })?);

    rows.push(layer_row("fuse", trials, seed, |s| {
        let store = randomized_store(|i| i.conv("f", 4, 2, 7), s);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let zg = uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let zs = uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        check_params(&store, &["f.weight", "f.bias"], &[zg, zs], |g, v| crate::qgff::fuse(g, &store, "f", v[0], v[1]), &opts(s))
    })?);

    rows.push(layer_row("cost_volume_embedding", trials, seed, |s| {
        let store = randomized_store(|i| i.conv("e", 1, 3, 7), s);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let feats = uniform(&[3, 3, 6], -1.0, 1.0, &mut rng);
        let queries = uniform(&[2, 6], -1.0, 1.0, &mut rng);
        check_params(
            &store,
            &["e.weight", "e.bias"],
            &[feats, queries],
            |g, v| {
                let c = crate::qgff::compute_cost_volume(g, v[0], v[1])?;
                crate::qgff::embed_cost_volume(g, &store, "e", c)
            },
            &opts(s),
        )
    })?);

    rows.push(layer_row("decoder_block", trials, seed, |s| {
        let store = randomized_store(
            |i| {
                i.deconv("d.up", 4, 4, 2);
                i.conv("d.conv", 8, 4, 3);
                for a in ["d.agr1", "d.agr2"] {
                    i.conv(&format!("{a}.conv"), 4, 4, 3);
                    i.norm(&format!("{a}.gn"), 4);
                }
            },
            s,
        );
        let names: Vec<&str> = store.names().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let z = uniform(&[2, 4, 2, 2], -1.0, 1.0, &mut rng);
        let tg = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let ts = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        check_params(
            &store,
            &names,
            &[z, tg, ts],
            |g, v| crate::ripd::decoder_block(g, &store, "d", v[0], crate::ripd::ProjectedTaps { g: v[1], s: v[2] }, 2),
            &opts(s),
        )
    })?);
    Ok(rows)
}

/// Smallest valid network, used for the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        image_size: 32,
        embed_dim: 8,
        latent_dim: 4,
        tap_dim: 2,
        decoder_dim: 4,
        gn_groups: 2,
        ..ModelConfig::default()
    };
    for enc in [&mut cfg.generalist, &mut cfg.specialist] {
        enc.depth = 2;
        enc.width = 8;
        enc.heads = 2;
        enc.mlp_ratio = 2;
        enc.taps = [1, 2];
    }
    cfg
}

/// Parameters of the tiny network checked end to end, one from each stage.
pub const MODEL_CHECK_PARAMS: [&str; 8] = [
    "generalist.blocks.0.attn.q.weight",
    "specialist.align.weight",
    "qgff.embed_g.weight",
    "qgff.fuse.weight",
    "ripd.tap2.s.proj.weight",
    "ripd.block1.conv.weight",
    "ripd.block2.agr2.gn.weight",
    "ripd.head.weight",
];

/// End-to-end check of logits `[32, 32, 2]` with respect to the image, the
/// queries, and [`MODEL_CHECK_PARAMS`].
pub fn model_check(seed: u64) -> Result<SuiteRow> {
    let model = GsNet::new(tiny_model_config())?;
    let store: ParamStore<f64> = model.init_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    let queries = uniform(&[2, 8], -1.0, 1.0, &mut rng);
    let report = check_params(
        &store,
        &MODEL_CHECK_PARAMS,
        &[image, queries],
        |g, v| Ok(model.forward(g, &store, v[0], v[1])?.logits),
        &GradCheckOptions { seed, max_coords: 24, kink_guard: true, ..GradCheckOptions::default() },
    )?;
    Ok(SuiteRow {
        name: "gsnet_end_to_end".into(),
        trials: 1,
        max_rel_error: report.max_rel_error(),
        tolerance: MODEL_TOLERANCE,
        skipped: report.skipped(),
    })
}

/// Every check: operations, composite layers, and the full network.
pub fn full_suite(trials: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = op_suite(trials, seed)?;
    rows.extend(layer_suite(trials.min(5), seed)?);
    rows.push(model_check(seed)?);
    Ok(rows)
}
