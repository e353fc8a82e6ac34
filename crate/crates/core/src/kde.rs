//! Isotropic Gaussian kernel density over PCA score vectors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    pub scores: Vec<Vec<f64>>,
    pub bandwidth: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn check_scores(scores: &[Vec<f64>]) -> Result<usize> {
    let l = scores.first().map(Vec::len).ok_or_else(|| CoreError::Invalid("no score vectors".into()))?;
    if l == 0 || scores.iter().any(|s| s.len() != l) {
        return Err(CoreError::Dimension("score vectors must share a positive length".into()));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CoreError::Invalid("score vectors must be finite".into()));
    }
    Ok(l)
}

/// Mean over samples of the distance to the nearest other sample.
pub fn mean_nearest_neighbor_distance(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let total: f64 = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(&points[i], &points[j]))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / n as f64
}

impl KdeModel {
    /// Bandwidth is the mean nearest-neighbour distance among the training scores.
    pub fn fit(scores: Vec<Vec<f64>>) -> Result<Self> {
        check_scores(&scores)?;
        if scores.len() < 2 {
            return Err(CoreError::Invalid("KDE needs at least 2 score vectors".into()));
        }
        let bandwidth = mean_nearest_neighbor_distance(&scores);
        if bandwidth <= 0.0 {
            return Err(CoreError::Invalid("KDE bandwidth is zero: score vectors are duplicates".into()));
        }
        Ok(Self { scores, bandwidth })
    }

    /// Model with an explicit bandwidth; zero is allowed and makes sampling return training scores.
    pub fn with_bandwidth(scores: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        check_scores(&scores)?;
        if !(bandwidth >= 0.0 && bandwidth.is_finite()) {
            return Err(CoreError::Invalid(format!("bandwidth must be finite and >= 0, got {bandwidth}")));
        }
        Ok(Self { scores, bandwidth })
    }

    pub fn dim(&self) -> usize {
        self.scores[0].len()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(CoreError::Dimension(format!("{} scores for a {}-mode density", z.len(), self.dim())));
        }
        let s2 = self.bandwidth * self.bandwidth;
        let exps: Vec<f64> = self.scores.iter().map(|zn| -sq_dist(z, zn) / (2.0 * s2)).collect();
        let top = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + exps.iter().map(|e| (e - top).exp()).sum::<f64>().ln();
        let l = self.dim() as f64;
        Ok(lse - (self.len() as f64).ln() - 0.5 * l * (2.0 * std::f64::consts::PI * s2).ln())
    }

    /// `(1/N) Σ_n (2πσ²)^(-L/2) exp(-|z - Z_n|² / 2σ²)`.
    pub fn density(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_density(z)?.exp())
    }

    /// Draw `index` of the stream `seed`: a kernel `n` chosen uniformly and
    /// `Z_n + σ ε`. Draws are independent of each other and of evaluation order.
    pub fn sample(&self, seed: u64, index: u64) -> (Vec<f64>, usize) {
        let mut rng = stream_rng(seed, index);
        let n = rng.gen_range(0..self.len());
        let z = self.scores[n]
            .iter()
            .map(|&m| {
                let e: f64 = rng.sample(StandardNormal);
                m + self.bandwidth * e
            })
            .collect();
        (z, n)
    }
}
