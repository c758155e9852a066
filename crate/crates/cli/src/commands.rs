use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gsnet::checkpoint::Checkpoint;
use gsnet::data::synth::write_corpus;
use gsnet::data::{compute_stats, merge_datasets, write_mask, write_rgb, DatasetManifest, MergeOptions};
use gsnet::eval::{hausdorff, miou, overlay, ConfusionMatrix, Report};
use gsnet::gradcheck::full_suite;
use gsnet::text::{EmbeddingFile, FileProvider};
use gsnet::train::{train as run_training, Sample};
use gsnet::{GsNet, QuerySet, Tensor};

use crate::model_io::*;
use crate::{CliError, CliResult, ConfigArgs};

fn load_manifest(path: &Path) -> CliResult<DatasetManifest> {
    require_file(path, "manifest")?;
    Ok(DatasetManifest::load(path)?)
}

pub fn train(
    args: &ConfigArgs,
    manifest: &Path,
    out: &Path,
    seed: Option<u64>,
    iters: Option<usize>,
    embeddings: Option<&Path>,
) -> CliResult {
    let cfg = load_config(args, seed, iters)?;
    let manifest = load_manifest(manifest)?;
    if manifest.samples.is_empty() {
        return Err(CliError::usage(format!("manifest `{}` has no samples", manifest.name)));
    }
    let queries = queries(&cfg, &manifest.classes, embeddings)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let image = manifest.load_image(rec)?;
        let mask = manifest.load_mask(rec)?;
        if (mask.height, mask.width) != (image.shape()[1], image.shape()[2]) {
            return Err(CliError::usage(format!("{}: mask and image extents differ", rec.mask.display())));
        }
        let (image, mask) = to_training_size(&image, &mask, cfg.image_size)?;
        samples.push(Sample { image, mask });
    }
    ensure_dir(out)?;

    let model = GsNet::new(cfg.clone())?;
    let mut store = model.init_params();
    let total = cfg.train.iterations;
    let every = (total / 20).max(1);
    let losses = run_training(&model, &mut store, &samples, &queries.embeddings, &cfg.train, |it, loss| {
        if (it + 1) % every == 0 || it + 1 == total {
            eprintln!("step {:>6}/{total}  loss {loss:.6}", it + 1);
        }
    })?;

    let mut log = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(log, "{},{l}", i + 1).unwrap();
    }
    write_file(&out.join("loss.csv"), log)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let metadata = BTreeMap::from([
        (META_CONFIG.to_string(), cfg.to_toml()),
        (META_CLASSES.to_string(), serde_json::to_string(&manifest.classes).expect("strings serialize")),
        (META_PROVIDER.to_string(), queries.provider_id.clone()),
    ]);
    Checkpoint::from_store(&store, metadata).save(&out.join("model.ckpt"))?;
    println!(
        "trained {total} steps: loss {:.6} -> {:.6}; wrote {}",
        losses[0],
        losses[losses.len() - 1],
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn warn_provider(loaded: &Loaded, q: &QuerySet) {
    if let Some(trained) = loaded.metadata.get(META_PROVIDER) {
        if *trained != q.provider_id {
            eprintln!("warning: model was trained with embeddings `{trained}`, querying with `{}`", q.provider_id);
        }
    }
}

pub fn infer(
    args: &ConfigArgs,
    checkpoint: &Path,
    image: &Path,
    classes: &[String],
    out: &Path,
    embeddings: Option<&Path>,
) -> CliResult {
    let classes: Vec<String> = classes.iter().map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
    if classes.is_empty() {
        return Err(CliError::usage("--classes needs at least one name"));
    }
    let loaded = load_checkpoint(checkpoint, args)?;
    require_file(image, "image")?;
    let pixels = gsnet::data::read_rgb(image)?;
    let q = queries(&loaded.model.config, &classes, embeddings)?;
    warn_provider(&loaded, &q);
    let mask = predict_mask(&loaded, &pixels, &q.embeddings)?;
    ensure_dir(out)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    write_mask(&out.join(format!("{stem}_mask.png")), &mask)?;
    write_rgb(&out.join(format!("{stem}_overlay.png")), &overlay(&pixels, &mask, 0.5)?)?;
    let mut counts = vec![0usize; classes.len()];
    for &v in &mask.indices {
        counts[v as usize] += 1;
    }
    for (i, (c, n)) in classes.iter().zip(&counts).enumerate() {
        println!("{i}\t{c}\t{n} px");
    }
    Ok(())
}

pub fn eval(
    args: &ConfigArgs,
    checkpoint: &Path,
    manifests: &[PathBuf],
    out: &Path,
    exclude: &[String],
    method: &str,
    embeddings: Option<&Path>,
) -> CliResult {
    let loaded = load_checkpoint(checkpoint, args)?;
    let manifests = manifests.iter().map(|p| load_manifest(p)).collect::<CliResult<Vec<_>>>()?;
    let mut report = Report { method: method.to_string(), results: Vec::new() };
    let mut detail = serde_json::Map::new();
    for m in &manifests {
        let q = queries(&loaded.model.config, &m.classes, embeddings)?;
        warn_provider(&loaded, &q);
        let mut cm = ConfusionMatrix::new(m.classes.len());
        for rec in &m.samples {
            let image = m.load_image(rec)?;
            let gt = m.load_mask(rec)?;
            let pred = predict_mask(&loaded, &image, &q.embeddings)?;
            cm.accumulate(&pred, &gt)?;
        }
        let skip: BTreeSet<usize> = m
            .classes
            .iter()
            .enumerate()
            .filter(|(_, c)| exclude.iter().any(|e| e.eq_ignore_ascii_case(c)))
            .map(|(i, _)| i)
            .collect();
        let r = miou(&cm, &skip)?;
        let per_class: serde_json::Map<String, serde_json::Value> =
            m.classes.iter().cloned().zip(r.per_class.iter().map(|v| serde_json::json!(v))).collect();
        detail.insert(m.name.clone(), serde_json::json!({ "miou": r.miou, "per_class": per_class }));
        report.results.push((m.name.clone(), r.miou));
    }
    ensure_dir(out)?;
    write_file(&out.join("report.txt"), report.to_text())?;
    write_file(&out.join("report.csv"), report.to_csv())?;
    write_file(&out.join("per_class.json"), serde_json::to_string_pretty(&detail).expect("json") + "\n")?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn stats(manifest: &Path, out: &Path) -> CliResult {
    let m = load_manifest(manifest)?;
    let s = compute_stats(&m);
    ensure_dir(out)?;
    write_file(&out.join("stats.json"), serde_json::to_string_pretty(&s).expect("json") + "\n")?;
    for sk in &s.skipped {
        eprintln!("skipped {}: {}", sk.mask.display(), sk.error);
    }
    println!("{} samples read, {} skipped, {} segments", s.samples_read, s.skipped.len(), s.normalized_centroids.len());
    Ok(())
}

pub fn merge(manifests: &[PathBuf], out: &Path, name: String, background: Option<Vec<String>>) -> CliResult {
    let inputs = manifests.iter().map(|p| load_manifest(p)).collect::<CliResult<Vec<_>>>()?;
    let mut opts = MergeOptions { name, ..MergeOptions::default() };
    if let Some(b) = background {
        opts.background_synonyms = b;
    }
    let merged = merge_datasets(&inputs, &opts)?;
    ensure_dir(out)?;
    merged.save(&out.join("manifest.json"))?;
    println!("{} classes, {} samples", merged.classes.len(), merged.samples.len());
    Ok(())
}

pub fn gradcheck(seed: u64, trials: usize, out: Option<&Path>) -> CliResult {
    if trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let rows = full_suite(trials, seed)?;
    let mut csv = String::from("check,trials,max_rel_error,tolerance,skipped,result\n");
    for r in &rows {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!("{:<24} {:>3} trials  rel {:.3e}  tol {:.0e}  {verdict}", r.name, r.trials, r.max_rel_error, r.tolerance);
        writeln!(csv, "{},{},{:e},{:e},{},{verdict}", r.name, r.trials, r.max_rel_error, r.tolerance, r.skipped).unwrap();
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_file(&dir.join("gradcheck.csv"), csv)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::failure(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn embedding_matrix(path: &Path) -> CliResult<Tensor<f32>> {
    require_file(path, "embedding file")?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let table: EmbeddingFile = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    FileProvider::from_table(path.display().to_string(), table.clone())?;
    if table.vectors.is_empty() {
        return Err(CliError::usage(format!("{}: no vectors", path.display())));
    }
    let data: Vec<f32> = table.vectors.values().flatten().copied().collect();
    Ok(Tensor::new(vec![table.vectors.len(), table.dim], data)?)
}

pub fn simcheck(a: &Path, b: &Path) -> CliResult {
    let (ea, eb) = (embedding_matrix(a)?, embedding_matrix(b)?);
    println!("{:.6}", hausdorff(&ea, &eb)?);
    Ok(())
}

pub fn synth(out: &Path, classes: &[String], count: usize, size: usize, seed: u64, name: &str) -> CliResult {
    if classes.is_empty() || count == 0 {
        return Err(CliError::usage("synth needs classes and a positive count"));
    }
    let m = write_corpus(out, name, classes, count, size, seed)?;
    println!("wrote {} samples to {}", m.samples.len(), out.join("manifest.json").display());
    Ok(())
}
