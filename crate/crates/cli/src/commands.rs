//! One function per pipeline stage. Each writes its data files under `out` and returns what it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use deepssm_core::augment::{augment_population, augmentation_model, fit_score_density, AugmentConfig};
use deepssm_core::downstream::{
    estimate_normals, fit_ppca, group_difference, latent_swim, metrics, select, swim_differences, trim_features,
    Classifier,
};
use deepssm_core::evaluate::{point_to_surface, rmse_report, surface_csv, time_inference};
use deepssm_core::networks::train::history_csv;
use deepssm_core::networks::{checkpoint, DeepSsm, Progress, TrainConfig, Trainer, TrainingSet};
use deepssm_core::shape::{read_correspondences, write_particles, write_scalar_particles};
use deepssm_core::synthbench::Label;
use deepssm_core::volume::read_volume;
use deepssm_core::{CorrespondenceSet, Volume};
use serde_json::json;

use crate::config::{AnalyzeSection, AugmentSection, InferSection, SeveritySection, SynthConfig};
use crate::dataset::{write_vector, Dataset, Writer};
use crate::{relative_to, StageOutput, UsageError};

fn write_text(path: &Path, text: &str, files: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    files.push(path.to_path_buf());
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value, files: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"), files)
}

fn finish(out: &Path, inputs: Vec<PathBuf>, files: Vec<PathBuf>, config: serde_json::Value, summary: serde_json::Value) -> StageOutput {
    StageOutput { inputs, outputs: relative_to(out, files), config, summary }
}

pub fn synth(cfg: &SynthConfig, out: &Path) -> anyhow::Result<StageOutput> {
    if cfg.test_count >= cfg.count {
        return Err(UsageError(format!("test_count ({}) must be below count ({})", cfg.test_count, cfg.count)).into());
    }
    cfg.family.validate().map_err(|e| UsageError(format!("invalid synth.family: {e}")))?;
    let samples = cfg.family.generate(cfg.count)?;
    let train_n = cfg.count - cfg.test_count;
    let mut files = Vec::new();
    for (split, part) in [("train", &samples[..train_n]), ("test", &samples[train_n..])] {
        if part.is_empty() {
            continue;
        }
        let mut w = Writer::create(&out.join(split))?;
        for s in part {
            w.add(&s.correspondences, Some(&s.volume), Some(s.label), Some(s.params))?;
        }
        files.extend(w.finish()?);
    }
    let pathological = samples.iter().filter(|s| s.label == Label::Pathological).count();
    Ok(finish(
        out,
        Vec::new(),
        files,
        serde_json::to_value(cfg)?,
        json!({ "train": train_n, "test": cfg.test_count, "pathological": pathological }),
    ))
}

fn resample(v: Volume, factor: usize) -> anyhow::Result<Volume> {
    Ok(if factor == 1 { v } else { v.downsample(factor)? })
}

pub fn augment(sec: &AugmentSection, input: &Path, out: &Path) -> anyhow::Result<StageOutput> {
    if sec.downsample == 0 {
        return Err(UsageError("augment.downsample must be >= 1".into()).into());
    }
    let ds = Dataset::load(input)?;
    let shapes = ds.shapes()?;
    let volumes = ds.volumes()?;
    let model = augmentation_model(&shapes)?;
    let kde = fit_score_density(&model, &shapes)?;
    let aug_cfg = AugmentConfig { count: sec.count, seed: sec.seed, lambda: sec.lambda };
    let samples = augment_population(&volumes, &shapes, &model, &kde, &aug_cfg)?;

    let mut w = Writer::create(out)?;
    if sec.include_originals {
        for ((e, s), v) in ds.entries.iter().zip(&shapes).zip(volumes) {
            w.add(s, Some(&resample(v, sec.downsample)?), e.label, e.params)?;
        }
    }
    let mut parents = vec![0usize; shapes.len()];
    for a in samples {
        parents[a.parent_id] += 1;
        let entry = w.add(&a.correspondences, Some(&resample(a.volume, sec.downsample)?), None, None)?;
        entry.parent = Some(ds.entries[a.parent_id].id.clone());
        entry.scores = Some(a.scores);
    }
    let mut files = w.finish()?;
    let summary = json!({
        "inputs": shapes.len(),
        "count": sec.count,
        "downsample": sec.downsample,
        "include_originals": sec.include_originals,
        "num_modes": model.num_modes(),
        "bandwidth": kde.bandwidth,
        "lambda": sec.lambda,
        "seed": sec.seed,
        "draws_per_parent": parents,
    });
    write_json(&out.join("augment.json"), &summary, &mut files)?;
    Ok(finish(out, vec![input.to_path_buf()], files, serde_json::to_value(sec)?, summary))
}

pub fn training_set(ds: &Dataset) -> anyhow::Result<TrainingSet> {
    Ok(TrainingSet::new(&ds.volumes()?, &ds.shapes()?)?)
}

pub fn train(cfg: &TrainConfig, data: &Path, resume: Option<&Path>, out: &Path) -> anyhow::Result<StageOutput> {
    cfg.validate().map_err(|e| UsageError(format!("invalid train section: {e}")))?;
    let ds = Dataset::load(data)?;
    let set = training_set(&ds)?;
    let mut inputs = vec![data.to_path_buf()];
    let mut trainer = match resume {
        Some(path) => {
            let loaded = checkpoint::load(path)?;
            let (mut saved, state) =
                loaded.training.with_context(|| format!("{} holds no training state to resume", path.display()))?;
            saved.stop_after_epoch = cfg.stop_after_epoch;
            inputs.push(path.to_path_buf());
            Trainer::resume(saved, loaded.model, state, &set)?
        }
        None => Trainer::new(cfg.clone(), &set)?,
    };
    let progress = trainer.run(&set)?;
    let mut files = Vec::new();
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&ckpt, &trainer.model, Some((&trainer.config, &trainer.state)))?;
    files.push(ckpt);
    write_text(&out.join("history.csv"), &history_csv(&trainer.state.history), &mut files)?;
    let best = trainer.state.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    let summary = json!({
        "variant": trainer.config.variant.name(),
        "epochs_run": trainer.state.history.len(),
        "finished": progress == Progress::Finished,
        "best_val_loss": best,
        "training_samples": trainer.train_indices().len(),
        "validation_samples": trainer.val_indices().len(),
    });
    Ok(finish(out, inputs, files, serde_json::to_value(&trainer.config)?, summary))
}

/// Volumes to run a model on: every entry of a dataset directory, or one volume file.
fn query_volumes(input: &Path) -> anyhow::Result<Vec<(crate::dataset::Entry, Volume)>> {
    if input.is_dir() {
        let ds = Dataset::load(input)?;
        ds.entries.iter().map(|e| Ok((e.clone(), ds.volume(e)?))).collect()
    } else {
        let id = input.file_stem().and_then(|s| s.to_str()).unwrap_or("query").to_string();
        let entry = crate::dataset::Entry {
            id,
            volume: None,
            particles: String::new(),
            descriptor: None,
            label: None,
            parent: None,
            scores: None,
            params: None,
        };
        Ok(vec![(entry, read_volume(input)?)])
    }
}

/// Brings a volume onto the model grid when it is an integer-factor finer version of it.
fn fit_to_model(v: &Volume, model: &DeepSsm) -> anyhow::Result<Volume> {
    let target = model.grid();
    if v.grid == *target {
        return Ok(v.clone());
    }
    let f = v.grid.dims[0] / target.dims[0].max(1);
    if f > 1 && (0..3).all(|a| v.grid.dims[a] == f * target.dims[a]) {
        let d = v.downsample(f)?;
        let close = |a: &[f64; 3], b: &[f64; 3]| (0..3).all(|i| (a[i] - b[i]).abs() <= 1e-9 * (1.0 + b[i].abs()));
        if d.grid.dims == target.dims && close(&d.grid.spacing, &target.spacing) && close(&d.grid.origin, &target.origin) {
            return Ok(Volume::new(*target, d.data)?);
        }
    }
    bail!("volume grid {:?} does not match the model grid {:?}", v.grid, target)
}

pub fn infer(sec: &InferSection, model_path: &Path, input: &Path, out: &Path) -> anyhow::Result<StageOutput> {
    let model = checkpoint::load(model_path)?.model;
    let queries = query_volumes(input)?;
    let mut w = Writer::create(out)?;
    let queries = queries.into_iter().map(|(e, v)| Ok((e, fit_to_model(&v, &model)?))).collect::<anyhow::Result<Vec<_>>>()?;
    for (e, v) in &queries {
        let inf = model.infer(v, e.id.clone())?;
        w.add(&inf.correspondences, None, e.label, e.params)?;
        w.add_descriptor(&inf.descriptor)?;
    }
    let files = w.finish()?;
    let mut summary = json!({ "samples": queries.len(), "num_points": model.num_points(), "descriptor_dim": model.descriptor_dim() });
    if sec.timing_repeats > 0 {
        let seconds = time_inference(&model, &queries[0].1, sec.timing_repeats)?;
        println!("inference time: median {seconds:.4} s over {} runs (single thread)", sec.timing_repeats);
        summary["median_inference_seconds"] = json!(seconds);
    }
    Ok(finish(out, vec![model_path.to_path_buf(), input.to_path_buf()], files, serde_json::to_value(sec)?, summary))
}

fn mean_shape(shapes: &[CorrespondenceSet]) -> anyhow::Result<CorrespondenceSet> {
    let n = shapes.len() as f64;
    let m = deepssm_core::shape::common_size(shapes)?;
    let points = (0..m).map(|i| std::array::from_fn(|k| shapes.iter().map(|s| s.points[i][k]).sum::<f64>() / n)).collect();
    Ok(CorrespondenceSet::new("mean", points)?)
}

pub fn evaluate(pred: &Path, truth: &Path, out: &Path) -> anyhow::Result<StageOutput> {
    let p = Dataset::load(pred)?;
    let t = Dataset::load(truth)?;
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    for e in &t.entries {
        let Some(pe) = p.entries.iter().find(|x| x.id == e.id) else {
            bail!("no prediction for {} in {}", e.id, pred.display());
        };
        predicted.push(p.shape(pe)?);
        actual.push(t.shape(e)?);
    }
    let report = rmse_report(&predicted, &actual)?;
    let mut files = Vec::new();
    write_text(&out.join("rmse.csv"), &report.to_csv(), &mut files)?;
    let mean = mean_shape(&actual)?;
    for (name, values) in [("per_point_mean.particles", &report.per_point.mean), ("per_point_std.particles", &report.per_point.std)] {
        let path = out.join(name);
        write_scalar_particles(&path, &mean.points, values)?;
        files.push(path);
    }
    let mut summary = json!({ "samples": actual.len(), "average_rmse": report.average_rmse });
    if t.entries.iter().all(|e| e.params.is_some()) {
        let rows = t
            .entries
            .iter()
            .zip(&predicted)
            .map(|(e, c)| Ok(point_to_surface(c, &e.params.expect("checked").surface()?)?))
            .collect::<anyhow::Result<Vec<_>>>()?;
        write_text(&out.join("surface.csv"), &surface_csv(&rows), &mut files)?;
        summary["mean_surface_distance"] = json!(rows.iter().map(|r| r.mean).sum::<f64>() / rows.len() as f64);
    }
    write_json(&out.join("evaluation.json"), &summary, &mut files)?;
    println!("average RMSE {:.6} over {} samples", report.average_rmse, actual.len());
    Ok(finish(out, vec![pred.to_path_buf(), truth.to_path_buf()], files, json!({}), summary))
}

/// Query shapes with optional labels: from particles, or predicted from volumes when a model is given.
fn query_shapes(query: &Path, model: Option<&DeepSsm>) -> anyhow::Result<Vec<(CorrespondenceSet, Option<Label>)>> {
    if let Some(m) = model {
        return query_volumes(query)?
            .into_iter()
            .map(|(e, v)| Ok((m.infer(&fit_to_model(&v, m)?, e.id.clone())?.correspondences, e.label)))
            .collect();
    }
    if query.is_dir() {
        let ds = Dataset::load(query)?;
        return ds.entries.iter().map(|e| Ok((ds.shape(e)?, e.label))).collect();
    }
    if query.extension().is_some_and(|x| x == "raw") {
        return Err(UsageError(format!("{} is a volume; pass --model to predict its shape", query.display())).into());
    }
    let mut c = read_correspondences(query)?;
    c.sample_id = query.file_stem().and_then(|s| s.to_str()).unwrap_or("query").to_string();
    Ok(vec![(c, None)])
}

pub fn severity(sec: &SeveritySection, controls: &Path, query: &Path, model: Option<&Path>, out: &Path) -> anyhow::Result<StageOutput> {
    let control_set = Dataset::load(controls)?.filter_label(|l| l == Label::Control);
    ensure!(!control_set.entries.is_empty(), "{} contains no control shapes", controls.display());
    let ppca = fit_ppca(&control_set.shapes()?, sec.subspace_fraction)?;
    let model = model.map(|p| checkpoint::load(p).map(|l| l.model)).transpose()?;
    let queries = query_shapes(query, model.as_ref())?;
    let scores = queries.iter().map(|(s, _)| ppca.severity(s)).collect::<Result<Vec<_>, _>>()?;

    let mut csv = String::from("sample_id,severity,label\n");
    for ((s, l), v) in queries.iter().zip(&scores) {
        let label = match l {
            Some(Label::Control) => "control",
            Some(Label::Pathological) => "pathological",
            None => "",
        };
        csv.push_str(&format!("{},{v},{label}\n", s.sample_id));
    }
    let mut files = Vec::new();
    write_text(&out.join("severity.csv"), &csv, &mut files)?;

    let mean = CorrespondenceSet::from_flat("mean", &ppca.mean)?;
    let normals = estimate_normals(&mean.points, sec.normal_neighbors)?;
    let flagged: Vec<CorrespondenceSet> =
        queries.iter().filter(|(_, l)| *l == Some(Label::Pathological)).map(|(s, _)| s.clone()).collect();
    let field_shapes = if flagged.is_empty() { queries.iter().map(|(s, _)| s.clone()).collect() } else { flagged };
    let field = ppca.pointwise_mahalanobis(&field_shapes, &normals)?;
    let path = out.join("field.particles");
    write_scalar_particles(&path, &mean.points, &field)?;
    files.push(path);

    let mut summary = json!({
        "controls": control_set.entries.len(),
        "queries": queries.len(),
        "subspace_dim": ppca.subspace_dim(),
        "sigma2": ppca.sigma2,
    });
    let labels: Vec<Option<bool>> = queries.iter().map(|(_, l)| l.map(|l| l == Label::Pathological)).collect();
    if labels.iter().all(Option::is_some) {
        let labels: Vec<bool> = labels.into_iter().map(|l| l.expect("checked")).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let m = metrics(&scores, &labels)?;
            summary["metrics"] = serde_json::to_value(&m)?;
            write_json(&out.join("metrics.json"), &serde_json::to_value(&m)?, &mut files)?;
        }
    }
    for ((s, _), v) in queries.iter().zip(&scores).take(20) {
        println!("{} severity {v:.4}", s.sample_id);
    }
    let mut inputs = vec![controls.to_path_buf(), query.to_path_buf()];
    inputs.extend(model.is_some().then(|| PathBuf::from("model")));
    Ok(finish(out, inputs, files, serde_json::to_value(sec)?, summary))
}

pub fn difference(a: &Path, b: &Path, out: &Path) -> anyhow::Result<StageOutput> {
    let (ga, gb) = (Dataset::load(a)?.shapes()?, Dataset::load(b)?.shapes()?);
    let d = group_difference(&ga, &gb)?;
    let mut files = Vec::new();
    let path = out.join("difference.particles");
    write_scalar_particles(&path, &d.anchor, &d.normalized_magnitude)?;
    files.push(path);
    let path = out.join("displacement.particles");
    write_particles(&path, &d.displacement)?;
    files.push(path);
    let max = d.displacement.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
    Ok(finish(out, vec![a.to_path_buf(), b.to_path_buf()], files, json!({}), json!({ "max_displacement": max })))
}

pub fn swim(sec: &AnalyzeSection, model_path: &Path, a: &Path, b: &Path, out: &Path) -> anyhow::Result<StageOutput> {
    let DeepSsm::Tl(model) = checkpoint::load(model_path)?.model else {
        return Err(UsageError("latent swim needs a TL model".into()).into());
    };
    let (ga, gb) = (Dataset::load(a)?.shapes()?, Dataset::load(b)?.shapes()?);
    let path = latent_swim(&model, &ga, &gb, sec.swim_steps)?;
    let diffs = swim_differences(&path);
    let dir = out.join("swim");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (i, (c, d)) in path.iter().zip(&diffs).enumerate() {
        let p = dir.join(format!("step_{i:03}.particles"));
        write_particles(&p, &c.points)?;
        files.push(p);
        let mags: Vec<f64> = d.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let p = dir.join(format!("diff_{i:03}.particles"));
        write_scalar_particles(&p, &path[0].points, &mags)?;
        files.push(p);
    }
    Ok(finish(
        out,
        vec![model_path.to_path_buf(), a.to_path_buf(), b.to_path_buf()],
        files,
        serde_json::to_value(sec)?,
        json!({ "steps": path.len() }),
    ))
}

fn labelled_descriptors(dir: &Path) -> anyhow::Result<(Vec<String>, Vec<Vec<f64>>, Vec<bool>)> {
    let ds = Dataset::load(dir)?;
    let mut ids = Vec::new();
    let mut desc = Vec::new();
    let mut labels = Vec::new();
    for e in &ds.entries {
        let Some(l) = e.label else { bail!("{}: entry {} has no label", dir.display(), e.id) };
        ids.push(e.id.clone());
        desc.push(ds.descriptor(e)?);
        labels.push(l == Label::Pathological);
    }
    Ok((ids, desc, labels))
}

pub fn classify(sec: &AnalyzeSection, train: &Path, test: &Path, out: &Path) -> anyhow::Result<StageOutput> {
    let (_, train_x, train_y) = labelled_descriptors(train)?;
    let (test_ids, test_x, test_y) = labelled_descriptors(test)?;
    let group = |want: bool| train_x.iter().zip(&train_y).filter(|(_, &y)| y == want).map(|(x, _)| x.clone()).collect::<Vec<_>>();
    let k = sec.trim.min(train_x[0].len());
    let keep = trim_features(&group(false), &group(true), k)?;
    let trimmed = |xs: &[Vec<f64>]| xs.iter().map(|x| select(x, &keep)).collect::<Vec<_>>();
    let clf = Classifier::fit(&trimmed(&train_x), &train_y, &sec.classifier)?;
    let probs = clf.predict(&trimmed(&test_x))?;
    let mut csv = String::from("sample_id,probability,label\n");
    for ((id, p), y) in test_ids.iter().zip(&probs).zip(&test_y) {
        csv.push_str(&format!("{id},{p},{}\n", u8::from(*y)));
    }
    let mut files = Vec::new();
    write_text(&out.join("predictions.csv"), &csv, &mut files)?;
    let keep_f: Vec<f64> = keep.iter().map(|&i| i as f64).collect();
    let path = out.join("selected_features.txt");
    write_vector(&path, &keep_f)?;
    files.push(path);
    let mut summary = json!({ "selected": keep });
    if test_y.iter().any(|&y| y) && test_y.iter().any(|&y| !y) {
        let m = metrics(&probs, &test_y)?;
        write_json(&out.join("metrics.json"), &serde_json::to_value(&m)?, &mut files)?;
        summary["metrics"] = serde_json::to_value(&m)?;
    }
    Ok(finish(out, vec![train.to_path_buf(), test.to_path_buf()], files, serde_json::to_value(sec)?, summary))
}
