//! Losses for correspondence, score and latent regression, and the focal
//! hyperparameter heuristics.

use std::str::FromStr;

use deepssm_nn::graph::focal_value_and_factor;
use deepssm_nn::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Default focal sharpness for particle-level losses.
pub const FOCAL_A_PARTICLE: f64 = 10.0;
/// Default focal sharpness for latent-space losses.
pub const FOCAL_A_LATENT: f64 = 1.0;
/// Percentile of particle deviations used as the focal threshold.
pub const FOCAL_C_PERCENTILE: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub a: f64,
    pub c: f64,
}

impl FocalParams {
    pub fn new(a: f64, c: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite() && c > 0.0 && c.is_finite()) {
            return Err(CoreError::Invalid(format!("focal parameters need a > 0 and c > 0, got a = {a}, c = {c}")));
        }
        Ok(Self { a, c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalContext {
    Particle,
    Latent,
}

impl FromStr for FocalContext {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "particle" => Ok(FocalContext::Particle),
            "latent" => Ok(FocalContext::Latent),
            other => Err(CoreError::Invalid(format!("unknown focal context {other:?} (expected particle or latent)"))),
        }
    }
}

pub fn focal_a_default(context: FocalContext) -> f64 {
    match context {
        FocalContext::Particle => FOCAL_A_PARTICLE,
        FocalContext::Latent => FOCAL_A_LATENT,
    }
}

/// `e² / (1 + exp(a (c - e)))` for an error norm `e >= 0`.
pub fn focal_value(e: f64, params: FocalParams) -> f64 {
    focal_value_and_factor(e, params.a, params.c).0
}

/// Percentile `q` (0..=100) with linear interpolation between order statistics
/// (position `(n - 1) q / 100`).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::Invalid("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(CoreError::Invalid(format!("percentile must be in [0, 100], got {q}")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Focal threshold: the 90th percentile of `|C_i^j - μ^j|` over samples `i`
/// and particles `j` (flattened shapes). Fails when it is not positive.
pub fn focal_c_heuristic(shapes: &[Vec<f64>], mean: &[f64]) -> Result<f64> {
    if shapes.is_empty() {
        return Err(CoreError::Invalid("focal threshold needs a non-empty population".into()));
    }
    let mut dists = Vec::with_capacity(shapes.len() * mean.len() / 3);
    for s in shapes {
        if s.len() != mean.len() {
            return Err(CoreError::Dimension(format!("shape with {} coordinates vs mean {}", s.len(), mean.len())));
        }
        for (p, m) in s.chunks(3).zip(mean.chunks(3)) {
            dists.push(((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2) + (p[2] - m[2]).powi(2)).sqrt());
        }
    }
    positive_threshold(percentile(&dists, FOCAL_C_PERCENTILE)?)
}

/// Latent focal threshold: the 90th percentile of `|S_i - mean(S)|`.
pub fn latent_c_heuristic(latents: &[Vec<f64>]) -> Result<f64> {
    let n = latents.len();
    if n == 0 {
        return Err(CoreError::Invalid("latent threshold needs a non-empty population".into()));
    }
    let d = latents[0].len();
    let mean: Vec<f64> = (0..d).map(|k| latents.iter().map(|s| s[k]).sum::<f64>() / n as f64).collect();
    let dists: Vec<f64> =
        latents.iter().map(|s| s.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()).collect();
    positive_threshold(percentile(&dists, FOCAL_C_PERCENTILE)?)
}

fn positive_threshold(c: f64) -> Result<f64> {
    if c > 0.0 {
        Ok(c)
    } else {
        Err(CoreError::Invalid("focal threshold c is 0: population has no deviation from its mean".into()))
    }
}

/// How a prediction is compared with its target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairLoss {
    /// Batch mean of the squared Euclidean distance between flattened rows.
    SquaredL2,
    /// Focal loss per 3D particle, averaged over particles and batch.
    FocalParticle(FocalParams),
    /// Focal loss on each row's full vector norm, averaged over the batch.
    FocalVector(FocalParams),
}

fn check_pair(g: &Graph, pred: Var, target: Var) -> Result<(usize, usize)> {
    let (ps, ts) = (g.value(pred).shape(), g.value(target).shape());
    if ps != ts || ps.len() != 2 {
        return Err(CoreError::Dimension(format!("loss operands {ps:?} vs {ts:?}")));
    }
    Ok((ps[0], ps[1]))
}

impl PairLoss {
    /// Scalar loss between `[B, D]` predictions and targets.
    pub fn apply(&self, g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
        let (b, d) = check_pair(g, pred, target)?;
        let diff = g.sub(pred, target)?;
        let per = match *self {
            PairLoss::SquaredL2 => g.row_sq_norm(diff)?,
            PairLoss::FocalVector(p) => g.focal_rows(diff, p.a, p.c)?,
            PairLoss::FocalParticle(p) => {
                if d % 3 != 0 {
                    return Err(CoreError::Dimension(format!("particle loss on {d} coordinates")));
                }
                let rows = g.reshape(diff, &[b * d / 3, 3])?;
                g.focal_rows(rows, p.a, p.c)?
            }
        };
        Ok(g.mean(per)?)
    }
}

/// Correspondence loss: batch mean of `|C - Ĉ|²`.
pub fn loss_corr(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    PairLoss::SquaredL2.apply(g, pred, target)
}

/// Score loss: batch mean of `|z - ẑ|²`.
pub fn loss_pca(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    PairLoss::SquaredL2.apply(g, pred, target)
}

pub fn loss_focal_particles(g: &mut Graph, pred: Var, target: Var, params: FocalParams) -> Result<Var> {
    PairLoss::FocalParticle(params).apply(g, pred, target)
}

pub fn loss_focal_vectors(g: &mut Graph, pred: Var, target: Var, params: FocalParams) -> Result<Var> {
    PairLoss::FocalVector(params).apply(g, pred, target)
}
