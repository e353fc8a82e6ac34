//! PCA shape model over a correspondence population.
//!
//! Covariance uses the `1/N` normalization. When the flattened dimension `3M`
//! exceeds the sample count the eigenvectors come from the `N x N` Gram matrix
//! (`u = Xᵀv / sqrt(N λ)`); both routes give the same model.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::shape::{common_size, CorrespondenceSet};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaSolver {
    /// Gram matrix when `3M > N`, covariance otherwise.
    Auto,
    Gram,
    Covariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    /// Mean shape, flattened `[x0, y0, z0, x1, ...]`.
    pub mean: Vec<f64>,
    /// Column-major `3M x L` orthonormal basis.
    basis: Vec<f64>,
    /// Mode variances, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Trace of the covariance (sum of every eigenvalue, retained or not).
    pub total_variance: f64,
    pub num_samples: usize,
}

fn data_matrix(population: &[CorrespondenceSet]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    common_size(population)?;
    let n = population.len();
    let d = population[0].len() * 3;
    let mut x = DMatrix::<f64>::zeros(n, d);
    for (r, s) in population.iter().enumerate() {
        for (c, v) in s.flatten().into_iter().enumerate() {
            x[(r, c)] = v;
        }
    }
    let mean = DVector::from_iterator(d, (0..d).map(|c| x.column(c).sum() / n as f64));
    for c in 0..d {
        let m = mean[c];
        x.column_mut(c).add_scalar_mut(-m);
    }
    Ok((x, mean))
}

/// Eigenpairs sorted by decreasing eigenvalue.
fn sorted_eigen(sym: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    (vals, vecs)
}

/// Makes each column's largest-magnitude entry positive (first such entry on ties).
pub(crate) fn fix_signs(basis: &mut DMatrix<f64>) {
    for mut col in basis.column_iter_mut() {
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Replaces columns `from..` by unit vectors orthogonal to all earlier columns,
/// drawn from the standard basis in order.
fn complete_basis(basis: &mut DMatrix<f64>, from: usize) {
    let d = basis.nrows();
    let mut candidate = 0;
    for col in from..basis.ncols() {
        loop {
            let mut v = DVector::<f64>::zeros(d);
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for prev in 0..col {
                    let p = basis.column(prev).into_owned();
                    let dot = p.dot(&v);
                    v -= p * dot;
                }
            }
            let norm = v.norm();
            if norm > 0.5 {
                basis.set_column(col, &(v / norm));
                break;
            }
        }
    }
}

/// Eigenvalues at or below this are treated as zero: relative to the leading one, and never
/// below the rounding noise that subtracting a mean of magnitude `mean_sq` leaves behind.
fn rank_floor(vals: &[f64], mean_sq: f64) -> f64 {
    (RANK_TOL * vals.first().copied().unwrap_or(0.0).max(0.0)).max(1e-24 * (1.0 + mean_sq))
}

impl ShapeModel {
    /// Fits a model keeping `num_modes` modes (at most `N - 1`).
    pub fn fit(population: &[CorrespondenceSet], num_modes: usize) -> Result<Self> {
        Self::fit_with(population, num_modes, PcaSolver::Auto)
    }

    /// Fits with all `N - 1` modes.
    /// Keeps every mode that can carry variance: `min(N - 1, 3M)`.
    pub fn fit_full(population: &[CorrespondenceSet]) -> Result<Self> {
        let d = population.first().map_or(0, |s| 3 * s.len());
        Self::fit(population, population.len().saturating_sub(1).min(d))
    }

    pub fn fit_with(population: &[CorrespondenceSet], num_modes: usize, solver: PcaSolver) -> Result<Self> {
        let n = population.len();
        if n < 2 {
            return Err(CoreError::Invalid(format!("PCA needs at least 2 samples, got {n}")));
        }
        let (x, mean) = data_matrix(population)?;
        let d = x.ncols();
        let max_modes = (n - 1).min(d);
        if num_modes == 0 || num_modes > max_modes {
            return Err(CoreError::Invalid(format!("num_modes must be in 1..={max_modes}, got {num_modes}")));
        }
        let use_gram = match solver {
            PcaSolver::Auto => d > n,
            PcaSolver::Gram => true,
            PcaSolver::Covariance => false,
        };
        let total_variance = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let mean_sq = mean.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let mut basis = DMatrix::<f64>::zeros(d, num_modes);
        let mut eigenvalues = vec![0.0; num_modes];
        let mut valid = 0;
        if use_gram {
            let (vals, vecs) = sorted_eigen(&x * x.transpose() / n as f64);
            let floor = rank_floor(&vals, mean_sq);
            for k in 0..num_modes {
                if vals[k] <= floor {
                    break;
                }
                let u = x.transpose() * vecs.column(k) / (n as f64 * vals[k]).sqrt();
                basis.set_column(k, &u);
                eigenvalues[k] = vals[k];
                valid += 1;
            }
        } else {
            let (vals, vecs) = sorted_eigen(x.transpose() * &x / n as f64);
            let floor = rank_floor(&vals, mean_sq);
            for k in 0..num_modes {
                if vals[k] <= floor {
                    break;
                }
                basis.set_column(k, &vecs.column(k));
                eigenvalues[k] = vals[k];
                valid += 1;
            }
        }
        complete_basis(&mut basis, valid);
        fix_signs(&mut basis);
        Ok(Self {
            mean: mean.iter().copied().collect(),
            basis: basis.as_slice().to_vec(),
            eigenvalues,
            total_variance,
            num_samples: n,
        })
    }

    /// Builds a model from explicit parts; `basis` is `3M x L` column-major.
    pub fn from_parts(mean: Vec<f64>, basis: Vec<f64>, eigenvalues: Vec<f64>, total_variance: f64, num_samples: usize) -> Result<Self> {
        let l = eigenvalues.len();
        if mean.is_empty() || mean.len() % 3 != 0 || basis.len() != mean.len() * l {
            return Err(CoreError::Dimension(format!(
                "mean {} / basis {} / {l} modes are inconsistent",
                mean.len(),
                basis.len()
            )));
        }
        Ok(Self { mean, basis, eigenvalues, total_variance, num_samples })
    }

    pub fn num_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn num_points(&self) -> usize {
        self.mean.len() / 3
    }

    /// Column-major `3M x L` basis values.
    pub fn basis_values(&self) -> &[f64] {
        &self.basis
    }

    pub fn basis(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim(), self.num_modes(), &self.basis)
    }

    pub fn basis_column(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.basis[k * d..(k + 1) * d]
    }

    /// Copy keeping the first `k` modes.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.num_modes() {
            return Err(CoreError::Invalid(format!("cannot keep {k} of {} modes", self.num_modes())));
        }
        let mut m = self.clone();
        m.basis.truncate(k * self.dim());
        m.eigenvalues.truncate(k);
        Ok(m)
    }

    /// Fraction of total variance carried by the first `k` modes. A population
    /// without variance counts as fully explained.
    pub fn variance_explained(&self, k: usize) -> Result<f64> {
        if k == 0 || k > self.num_modes() {
            return Err(CoreError::Invalid(format!("k must be in 1..={}, got {k}", self.num_modes())));
        }
        if self.total_variance <= 0.0 {
            return Ok(1.0);
        }
        Ok((self.eigenvalues[..k].iter().sum::<f64>() / self.total_variance).min(1.0))
    }

    /// Smallest mode count whose explained variance reaches `fraction`.
    pub fn modes_for_fraction(&self, fraction: f64) -> Result<usize> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CoreError::Invalid(format!("variance fraction must be in (0, 1], got {fraction}")));
        }
        for k in 1..=self.num_modes() {
            if self.variance_explained(k)? >= fraction - 1e-12 {
                return Ok(k);
            }
        }
        Ok(self.num_modes())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(CoreError::Dimension(format!("shape has {len} coordinates, model has {}", self.dim())));
        }
        Ok(())
    }

    /// `Z = Uᵀ (C - C̄)` for a flattened shape.
    pub fn project_flat(&self, flat: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(flat.len())?;
        let centred: Vec<f64> = flat.iter().zip(&self.mean).map(|(c, m)| c - m).collect();
        Ok((0..self.num_modes())
            .map(|k| self.basis_column(k).iter().zip(&centred).map(|(u, c)| u * c).sum())
            .collect())
    }

    pub fn project(&self, shape: &CorrespondenceSet) -> Result<Vec<f64>> {
        self.project_flat(&shape.flatten())
    }

    /// `C = U z + C̄`, flattened.
    pub fn reconstruct_flat(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.num_modes() {
            return Err(CoreError::Dimension(format!("{} scores for a {}-mode model", z.len(), self.num_modes())));
        }
        let mut out = self.mean.clone();
        for (k, &zk) in z.iter().enumerate() {
            for (o, u) in out.iter_mut().zip(self.basis_column(k)) {
                *o += u * zk;
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, z: &[f64], sample_id: impl Into<String>) -> Result<CorrespondenceSet> {
        CorrespondenceSet::from_flat(sample_id, &self.reconstruct_flat(z)?)
    }

    pub fn mean_shape(&self) -> CorrespondenceSet {
        CorrespondenceSet::from_flat("mean", &self.mean).expect("mean is a whole number of points")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: Vec<[f64; 3]>) -> CorrespondenceSet {
        CorrespondenceSet::new("s", points).unwrap()
    }

    #[test]
    fn two_samples_give_quarter_squared_distance() {
        // deviations are ±d/2, so the 1/N variance along the difference is |d|^2 / 4
        let a = set(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = set(vec![[0.0, 2.0, 0.0], [1.0, 0.0, 0.0]]);
        let m = ShapeModel::fit(&[a, b], 1).unwrap();
        assert!((m.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!((m.basis_column(0)[1] - 1.0).abs() < 1e-14);
        assert_eq!(m.mean, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_shapes_have_zero_spectrum() {
        let s = set(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let m = ShapeModel::fit(&[s.clone(), s.clone(), s.clone()], 2).unwrap();
        assert_eq!(m.eigenvalues, vec![0.0, 0.0]);
        assert_eq!(m.mean, s.flatten());
        let b = m.basis();
        assert!((b.transpose() * &b - DMatrix::identity(2, 2)).amax() < 1e-14);
        assert_eq!(m.variance_explained(1).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_requests() {
        let a = set(vec![[0.0; 3]]);
        let b = set(vec![[1.0; 3]]);
        assert!(ShapeModel::fit(&[a.clone()], 1).is_err());
        assert!(ShapeModel::fit(&[a.clone(), b.clone()], 2).is_err());
        let c = set(vec![[0.0; 3], [1.0; 3]]);
        assert!(matches!(ShapeModel::fit(&[a, c], 1), Err(CoreError::Dimension(_))));
        let m = ShapeModel::fit(&[b.clone(), set(vec![[2.0; 3]])], 1).unwrap();
        assert!(m.project_flat(&[0.0; 6]).is_err());
        assert!(m.reconstruct_flat(&[0.0, 1.0]).is_err());
        assert!(m.variance_explained(2).is_err());
    }
}
