//! Thin-plate-spline warps in 3D with kernel `φ(r) = r`.
//!
//! The spline interpolates the landmark displacements `target - source`:
//! `warp(x) = x + A [1, x] + Σ_i w_i φ(|x - s_i|)`, with `Σ w_i = 0` and
//! `Σ w_i s_iᵀ = 0`. Fitting displacements keeps the identity case exact
//! (all coefficients are zero).

use nalgebra::{DMatrix, Matrix3};
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::kde::mean_nearest_neighbor_distance;
use crate::shape::Point;
use crate::volume::{Grid, Volume};

/// Relative residual above which an unregularized solve is reported singular.
const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TpsWarp {
    pub source: Vec<Point>,
    /// Row `a` maps `[1, x, y, z]` to the affine part of displacement component `a`.
    pub displacement_affine: [[f64; 4]; 3],
    pub weights: Vec<Point>,
    pub lambda: f64,
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Default regularization: `1e-6` times the mean nearest-neighbour landmark spacing.
pub fn default_lambda(landmarks: &[Point]) -> f64 {
    let pts: Vec<Vec<f64>> = landmarks.iter().map(|p| p.to_vec()).collect();
    1e-6 * mean_nearest_neighbor_distance(&pts)
}

fn check_non_coplanar(points: &[Point]) -> Result<()> {
    let n = points.len() as f64;
    let c = [0, 1, 2].map(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut scatter = Matrix3::<f64>::zeros();
    for p in points {
        for r in 0..3 {
            for s in 0..3 {
                scatter[(r, s)] += (p[r] - c[r]) * (p[s] - c[s]);
            }
        }
    }
    let ev = scatter.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if hi <= 0.0 || lo <= 1e-12 * hi {
        return Err(CoreError::Singular("TPS landmarks are coplanar or collinear; the affine part is undetermined".into()));
    }
    Ok(())
}

impl TpsWarp {
    /// Fits the spline carrying `source[i]` onto `target[i]`; `lambda` is added to the
    /// kernel diagonal.
    pub fn fit(source: &[Point], target: &[Point], lambda: f64) -> Result<Self> {
        let m = source.len();
        if target.len() != m {
            return Err(CoreError::Dimension(format!("{m} source vs {} target landmarks", target.len())));
        }
        if m < 5 {
            return Err(CoreError::Invalid(format!("TPS needs at least 5 landmarks, got {m}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(CoreError::Invalid(format!("TPS lambda must be >= 0, got {lambda}")));
        }
        check_non_coplanar(source)?;
        let n = m + 4;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = dist(&source[i], &source[j]);
            }
            a[(i, i)] += lambda;
            a[(i, m)] = 1.0;
            a[(m, i)] = 1.0;
            for k in 0..3 {
                a[(i, m + 1 + k)] = source[i][k];
                a[(m + 1 + k, i)] = source[i][k];
            }
        }
        let mut rhs = DMatrix::<f64>::zeros(n, 3);
        for i in 0..m {
            for k in 0..3 {
                rhs[(i, k)] = target[i][k] - source[i][k];
            }
        }
        let singular = || {
            CoreError::Singular(format!(
                "TPS system is singular (degenerate landmarks) at lambda = {lambda}; use lambda > 0"
            ))
        };
        let sol = a.clone().lu().solve(&rhs).ok_or_else(singular)?;
        let rnorm = rhs.norm();
        if rnorm > 0.0 && (&a * &sol - &rhs).norm() > RESIDUAL_TOL * rnorm.max(1.0) * (1.0 + a.amax()) {
            return Err(singular());
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(singular());
        }
        let weights = (0..m).map(|i| [sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]]).collect();
        let mut displacement_affine = [[0.0; 4]; 3];
        for (k, row) in displacement_affine.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = sol[(m + c, k)];
            }
        }
        Ok(Self { source: source.to_vec(), displacement_affine, weights, lambda })
    }

    pub fn displacement(&self, p: Point) -> Point {
        let mut d = [0.0; 3];
        for (k, row) in self.displacement_affine.iter().enumerate() {
            d[k] = row[0] + row[1] * p[0] + row[2] * p[1] + row[3] * p[2];
        }
        for (s, w) in self.source.iter().zip(&self.weights) {
            let r = dist(&p, s);
            d[0] += w[0] * r;
            d[1] += w[1] * r;
            d[2] += w[2] * r;
        }
        d
    }

    pub fn apply(&self, p: Point) -> Point {
        let d = self.displacement(p);
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    }

    /// Full affine part of the map (identity included), rows acting on `[1, x, y, z]`.
    pub fn affine_matrix(&self) -> [[f64; 4]; 3] {
        let mut a = self.displacement_affine;
        for (k, row) in a.iter_mut().enumerate() {
            row[k + 1] += 1.0;
        }
        a
    }

    /// Largest violation of `Σ w_i = 0`, `Σ w_i s_iᵀ = 0`.
    pub fn side_condition_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..3 {
            let s0: f64 = self.weights.iter().map(|w| w[k]).sum();
            worst = worst.max(s0.abs());
            for c in 0..3 {
                let s: f64 = self.weights.iter().zip(&self.source).map(|(w, p)| w[k] * p[c]).sum();
                worst = worst.max(s.abs());
            }
        }
        worst
    }
}

/// Backward warping: each output voxel centre `x` takes the source intensity at
/// `warp(x)` (trilinear), so `warp` must map output space into source space.
pub fn warp_volume(warp: &TpsWarp, source: &Volume, output: Grid, background: f64) -> Result<Volume> {
    output.validate()?;
    let [nx, ny, nz] = output.dims;
    let slices: Vec<Vec<f64>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    out.push(source.sample(warp.apply(output.world(i, j, k)), background));
                }
            }
            out
        })
        .collect();
    Volume::new(output, slices.concat())
}
