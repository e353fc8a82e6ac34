//! Correspondence accuracy metrics, point-to-surface distances and inference timing.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::networks::DeepSsm;
use crate::shape::CorrespondenceSet;
use crate::surface::Surface;
use crate::volume::Volume;

fn check_pair(a: &CorrespondenceSet, b: &CorrespondenceSet) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoreError::Dimension(format!(
            "{} has {} points, {} has {}",
            a.sample_id,
            a.len(),
            b.sample_id,
            b.len()
        )));
    }
    Ok(())
}

/// Mean over x, y and z of the per-coordinate RMSE across all points.
pub fn rmse(predicted: &CorrespondenceSet, truth: &CorrespondenceSet) -> Result<f64> {
    check_pair(predicted, truth)?;
    let n = predicted.len() as f64;
    let mut total = 0.0;
    for axis in 0..3 {
        let ss: f64 = predicted.points.iter().zip(&truth.points).map(|(p, t)| (p[axis] - t[axis]).powi(2)).sum();
        total += (ss / n).sqrt();
    }
    Ok(total / 3.0)
}

/// Per-point `sqrt(|p - t|^2 / 3)` for one sample.
pub fn point_rmse(predicted: &CorrespondenceSet, truth: &CorrespondenceSet) -> Result<Vec<f64>> {
    check_pair(predicted, truth)?;
    Ok(predicted
        .points
        .iter()
        .zip(&truth.points)
        .map(|(p, t)| ((0..3).map(|k| (p[k] - t[k]).powi(2)).sum::<f64>() / 3.0).sqrt())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointField {
    pub mean: Vec<f64>,
    /// Population standard deviation across samples.
    pub std: Vec<f64>,
}

fn aligned<'a>(
    predicted: &'a [CorrespondenceSet],
    truth: &'a [CorrespondenceSet],
) -> Result<impl Iterator<Item = (&'a CorrespondenceSet, &'a CorrespondenceSet)>> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(CoreError::Dimension(format!(
            "{} predictions vs {} ground-truth shapes",
            predicted.len(),
            truth.len()
        )));
    }
    Ok(predicted.iter().zip(truth))
}

/// Per-point RMSE across a population: mean and population std over samples.
pub fn per_point_rmse(predicted: &[CorrespondenceSet], truth: &[CorrespondenceSet]) -> Result<PointField> {
    let fields = aligned(predicted, truth)?.map(|(p, t)| point_rmse(p, t)).collect::<Result<Vec<_>>>()?;
    let m = fields[0].len();
    if fields.iter().any(|f| f.len() != m) {
        return Err(CoreError::Dimension("samples have different particle counts".into()));
    }
    let n = fields.len() as f64;
    let mean: Vec<f64> = (0..m).map(|i| fields.iter().map(|f| f[i]).sum::<f64>() / n).collect();
    let std = (0..m).map(|i| (fields.iter().map(|f| (f[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt()).collect();
    Ok(PointField { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub sample_ids: Vec<String>,
    pub per_sample: Vec<f64>,
    pub average_rmse: f64,
    pub per_point: PointField,
}

pub fn rmse_report(predicted: &[CorrespondenceSet], truth: &[CorrespondenceSet]) -> Result<RmseReport> {
    let per_sample = aligned(predicted, truth)?.map(|(p, t)| rmse(p, t)).collect::<Result<Vec<_>>>()?;
    let average_rmse = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(RmseReport {
        sample_ids: truth.iter().map(|t| t.sample_id.clone()).collect(),
        per_sample,
        average_rmse,
        per_point: per_point_rmse(predicted, truth)?,
    })
}

impl RmseReport {
    /// `sample_id,rmse` rows followed by an `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,rmse\n");
        for (id, v) in self.sample_ids.iter().zip(&self.per_sample) {
            let _ = writeln!(out, "{id},{v}");
        }
        let _ = writeln!(out, "average,{}", self.average_rmse);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistance {
    pub sample_id: String,
    pub mean: f64,
    pub max: f64,
}

/// One-sided distance from each predicted point to the reference surface.
pub fn point_to_surface(points: &CorrespondenceSet, surface: &Surface) -> Result<SurfaceDistance> {
    if points.is_empty() {
        return Err(CoreError::Invalid(format!("{} has no points", points.sample_id)));
    }
    let d: Vec<f64> = points.points.par_iter().map(|&p| surface.distance(p)).collect();
    Ok(SurfaceDistance {
        sample_id: points.sample_id.clone(),
        mean: d.iter().sum::<f64>() / d.len() as f64,
        max: d.iter().copied().fold(0.0, f64::max),
    })
}

pub fn surface_csv(rows: &[SurfaceDistance]) -> String {
    let mut out = String::from("sample_id,mean_distance,max_distance\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.sample_id, r.mean, r.max);
    }
    out
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median wall-clock seconds of single-image inference on one thread, after one warm-up call.
pub fn time_inference(model: &DeepSsm, volume: &Volume, repetitions: usize) -> Result<f64> {
    if repetitions == 0 {
        return Err(CoreError::Invalid("repetitions must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CoreError::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        model.infer(volume, "warmup")?;
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            model.infer(volume, "timed")?;
            times.push(t.elapsed().as_secs_f64());
        }
        Ok(median(&times).expect("non-empty"))
    })
}
