//! Analyses on predicted shapes: PPCA Mahalanobis severity, group
//! differences, latent interpolation and descriptor classification.

use deepssm_nn::{Adam, AdamConfig, Graph, LayerSpec, Mode, ParamStore, Sequential, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::networks::TlDeepSsm;
use crate::shape::{common_size, CorrespondenceSet, Point};
use crate::shape_stats::ShapeModel;

/// Default fraction of variance kept in the PPCA subspace.
pub const SUBSPACE_FRACTION: f64 = 0.95;
/// Relative floor on the residual variance, as a multiple of the largest eigenvalue.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// Full-rank covariance `S = U_L Λ_L U_Lᵀ + σ² I` of a control population and its eigenpairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityModel {
    pub mean: Vec<f64>,
    /// Retained subspace: column-major `D x L` basis and its eigenvalues.
    pub subspace_basis: Vec<f64>,
    pub subspace_eigenvalues: Vec<f64>,
    /// Residual variance before flooring.
    pub sigma2_raw: f64,
    /// Residual variance used in `S`.
    pub sigma2: f64,
    /// Eigenpairs of `S`, descending: column-major `D x D` vectors and values.
    pub s_vectors: Vec<f64>,
    pub s_eigenvalues: Vec<f64>,
    pub subspace_fraction: f64,
}

fn flat_population(shapes: &[CorrespondenceSet]) -> Result<Vec<Vec<f64>>> {
    common_size(shapes)?;
    Ok(shapes.iter().map(CorrespondenceSet::flatten).collect())
}

/// Fits PPCA to controls; the subspace keeps the smallest mode count reaching `subspace_fraction`.
pub fn fit_ppca(controls: &[CorrespondenceSet], subspace_fraction: f64) -> Result<SeverityModel> {
    if controls.len() < 2 {
        return Err(CoreError::Invalid(format!("PPCA needs at least 2 controls, got {}", controls.len())));
    }
    let pca = ShapeModel::fit_full(controls)?;
    let max_lambda = pca.eigenvalues.first().copied().unwrap_or(0.0);
    // identical controls leave only rounding noise from the mean subtraction
    let scale = 1.0 + pca.mean.iter().map(|v| v * v).sum::<f64>() / pca.mean.len() as f64;
    if !(max_lambda > 1e-24 * scale) {
        return Err(CoreError::Singular("controls have zero covariance".into()));
    }
    let l = pca.modes_for_fraction(subspace_fraction)?;
    let d = pca.dim();
    let kept: f64 = pca.eigenvalues[..l].iter().sum();
    let sigma2_raw = if d > l { ((pca.total_variance - kept) / (d - l) as f64).max(0.0) } else { 0.0 };
    let floor = SIGMA2_FLOOR * max_lambda;
    let sigma2 = if sigma2_raw < floor {
        log::warn!("PPCA residual variance {sigma2_raw:e} is below the floor; using {floor:e}");
        floor
    } else {
        sigma2_raw
    };
    let sub = pca.truncated(l)?;
    let u = sub.basis();
    let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&sub.eigenvalues));
    let s = &u * lam * u.transpose() + DMatrix::identity(d, d) * sigma2;
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut vectors = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    crate::shape_stats::fix_signs(&mut vectors);
    // S is positive definite by construction; clamp rounding noise at the floor
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(sigma2)).collect();
    Ok(SeverityModel {
        mean: pca.mean.clone(),
        subspace_basis: sub.basis_values().to_vec(),
        subspace_eigenvalues: sub.eigenvalues.clone(),
        sigma2_raw,
        sigma2,
        s_vectors: vectors.as_slice().to_vec(),
        s_eigenvalues: values,
        subspace_fraction,
    })
}

impl SeverityModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn subspace_dim(&self) -> usize {
        self.subspace_eigenvalues.len()
    }

    pub fn s_vectors(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim(), self.dim(), &self.s_vectors)
    }

    /// `S` from its stored eigenpairs.
    pub fn covariance(&self) -> DMatrix<f64> {
        let u = self.s_vectors();
        &u * DMatrix::from_diagonal(&DVector::from_column_slice(&self.s_eigenvalues)) * u.transpose()
    }

    /// `S` from the subspace and residual variance.
    pub fn covariance_from_subspace(&self) -> DMatrix<f64> {
        let d = self.dim();
        let u = DMatrix::from_column_slice(d, self.subspace_dim(), &self.subspace_basis);
        &u * DMatrix::from_diagonal(&DVector::from_column_slice(&self.subspace_eigenvalues)) * u.transpose()
            + DMatrix::identity(d, d) * self.sigma2
    }

    fn deviation(&self, shape: &CorrespondenceSet) -> Result<DVector<f64>> {
        let flat = shape.flatten();
        if flat.len() != self.dim() {
            return Err(CoreError::Dimension(format!(
                "{} has {} coordinates, model expects {}",
                shape.sample_id,
                flat.len(),
                self.dim()
            )));
        }
        Ok(DVector::from_iterator(flat.len(), flat.iter().zip(&self.mean).map(|(a, b)| a - b)))
    }

    /// `U_S Λ_S^{-1/2} U_Sᵀ (C - C̄)`.
    pub fn whiten(&self, shape: &CorrespondenceSet) -> Result<Vec<f64>> {
        let dev = self.deviation(shape)?;
        let u = self.s_vectors();
        let mut proj = u.tr_mul(&dev);
        for (p, l) in proj.iter_mut().zip(&self.s_eigenvalues) {
            *p /= l.sqrt();
        }
        Ok((u * proj).iter().copied().collect())
    }

    /// L2 norm of the whitened deviation.
    pub fn severity(&self, shape: &CorrespondenceSet) -> Result<f64> {
        Ok(self.whiten(shape)?.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// Mean whitened deviation of `shapes`, projected per point onto the outward normals.
    pub fn pointwise_mahalanobis(&self, shapes: &[CorrespondenceSet], normals: &[Point]) -> Result<Vec<f64>> {
        if shapes.is_empty() {
            return Err(CoreError::Invalid("pointwise field needs at least one shape".into()));
        }
        if normals.len() * 3 != self.dim() {
            return Err(CoreError::Dimension(format!("{} normals for {} points", normals.len(), self.dim() / 3)));
        }
        let mut acc = vec![0.0; self.dim()];
        for s in shapes {
            for (a, w) in acc.iter_mut().zip(self.whiten(s)?) {
                *a += w;
            }
        }
        let n = shapes.len() as f64;
        Ok(normals
            .iter()
            .enumerate()
            .map(|(i, nrm)| (0..3).map(|k| acc[3 * i + k] / n * nrm[k]).sum())
            .collect())
    }
}

/// Outward unit normals by plane fitting over the `k` nearest points, oriented away from the centroid.
pub fn estimate_normals(points: &[Point], k: usize) -> Result<Vec<Point>> {
    if points.len() < 3 || k < 2 {
        return Err(CoreError::Invalid("normal estimation needs >= 3 points and k >= 2".into()));
    }
    let k = k.min(points.len() - 1);
    let n = points.len() as f64;
    let centroid: Point = std::array::from_fn(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let d2 = |a: &Point, b: &Point| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    points
        .iter()
        .map(|p| {
            let mut idx: Vec<usize> = (0..points.len()).collect();
            idx.sort_by(|&a, &b| d2(p, &points[a]).total_cmp(&d2(p, &points[b])).then(a.cmp(&b)));
            let nb: Vec<&Point> = idx[..=k].iter().map(|&i| &points[i]).collect();
            let m = nb.len() as f64;
            let c: Point = std::array::from_fn(|a| nb.iter().map(|q| q[a]).sum::<f64>() / m);
            let mut cov = nalgebra::Matrix3::<f64>::zeros();
            for q in &nb {
                let v = nalgebra::Vector3::new(q[0] - c[0], q[1] - c[1], q[2] - c[2]);
                cov += v * v.transpose();
            }
            let eig = cov.symmetric_eigen();
            let imin = (0..3).min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).expect("3 values");
            let mut nrm: Point = std::array::from_fn(|a| eig.eigenvectors[(a, imin)]);
            let out: f64 = (0..3).map(|a| nrm[a] * (p[a] - centroid[a])).sum();
            if out < 0.0 {
                nrm = nrm.map(|v| -v);
            }
            Ok(nrm)
        })
        .collect()
}

fn mean_points(shapes: &[CorrespondenceSet]) -> Vec<Point> {
    let n = shapes.len() as f64;
    (0..shapes[0].len())
        .map(|i| std::array::from_fn(|a| shapes.iter().map(|s| s.points[i][a]).sum::<f64>() / n))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDifference {
    /// Mean shape of group A, where the field is anchored.
    pub anchor: Vec<Point>,
    /// `mean(A) - mean(B)` per point.
    pub displacement: Vec<Point>,
    /// Displacement length divided by its maximum (all zero if there is no difference).
    pub normalized_magnitude: Vec<f64>,
}

pub fn group_difference(group_a: &[CorrespondenceSet], group_b: &[CorrespondenceSet]) -> Result<GroupDifference> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(CoreError::Invalid("both groups need at least one shape".into()));
    }
    let ma = common_size(group_a)?;
    let mb = common_size(group_b)?;
    if ma != mb {
        return Err(CoreError::Dimension(format!("groups have {ma} and {mb} points")));
    }
    let anchor = mean_points(group_a);
    let mean_b = mean_points(group_b);
    let displacement: Vec<Point> =
        anchor.iter().zip(&mean_b).map(|(a, b)| std::array::from_fn(|k| a[k] - b[k])).collect();
    let mags: Vec<f64> = displacement.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    let normalized_magnitude = mags.iter().map(|m| if max > 0.0 { m / max } else { 0.0 }).collect();
    Ok(GroupDifference { anchor, displacement, normalized_magnitude })
}

fn encode_mean(model: &TlDeepSsm, shapes: &[CorrespondenceSet]) -> Result<Vec<f64>> {
    if shapes.is_empty() {
        return Err(CoreError::Invalid("latent swim needs non-empty groups".into()));
    }
    let d = 3 * model.num_points();
    let flat = flat_population(shapes)?;
    if flat[0].len() != d {
        return Err(CoreError::Dimension(format!("shapes have {} coordinates, model expects {d}", flat[0].len())));
    }
    let mut g = Graph::new();
    let c = g.constant(Tensor::new(vec![flat.len(), d], flat.concat())?)?;
    let s = model.encode(&mut g, c)?;
    let n = flat.len() as f64;
    let z = g.value(s).data();
    Ok((0..model.latent_dim).map(|k| (0..flat.len()).map(|i| z[i * model.latent_dim + k]).sum::<f64>() / n).collect())
}

/// Decodes `(1 - λ) μ_a + λ μ_b` of the group mean latents for `steps` evenly spaced λ in [0, 1].
pub fn latent_swim(
    model: &TlDeepSsm,
    group_a: &[CorrespondenceSet],
    group_b: &[CorrespondenceSet],
    steps: usize,
) -> Result<Vec<CorrespondenceSet>> {
    if steps < 2 {
        return Err(CoreError::Invalid(format!("latent swim needs >= 2 steps, got {steps}")));
    }
    let (za, zb) = (encode_mean(model, group_a)?, encode_mean(model, group_b)?);
    let k = za.len();
    let lat: Vec<f64> = (0..steps)
        .flat_map(|s| {
            let t = s as f64 / (steps - 1) as f64;
            za.iter().zip(&zb).map(move |(a, b)| (1.0 - t) * a + t * b).collect::<Vec<_>>()
        })
        .collect();
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(vec![steps, k], lat)?)?;
    let c = model.decode(&mut g, s)?;
    g.value(c)
        .data()
        .chunks(3 * model.num_points())
        .enumerate()
        .map(|(i, row)| CorrespondenceSet::from_flat(format!("swim_{i:03}"), row))
        .collect()
}

/// Per-step displacement `C_λ - C_0`.
pub fn swim_differences(path: &[CorrespondenceSet]) -> Vec<Vec<Point>> {
    let Some(first) = path.first() else { return Vec::new() };
    path.iter()
        .map(|c| c.points.iter().zip(&first.points).map(|(p, q)| std::array::from_fn(|k| p[k] - q[k])).collect())
        .collect()
}

fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len()).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect()
}

/// Indices of the `k` largest `|mean(a) - mean(b)|`, descending, ties to the lower index.
pub fn trim_features(descriptors_a: &[Vec<f64>], descriptors_b: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if descriptors_a.is_empty() || descriptors_b.is_empty() {
        return Err(CoreError::Invalid("both descriptor groups must be non-empty".into()));
    }
    let d = descriptors_a[0].len();
    if descriptors_a.iter().chain(descriptors_b).any(|r| r.len() != d) {
        return Err(CoreError::Dimension("descriptors have different lengths".into()));
    }
    if d < k {
        return Err(CoreError::Invalid(format!("descriptor dimension {d} is below k = {k}")));
    }
    let diff: Vec<f64> =
        mean_vector(descriptors_a).iter().zip(mean_vector(descriptors_b)).map(|(a, b)| (a - b).abs()).collect();
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&i, &j| diff[j].total_cmp(&diff[i]).then(i.cmp(&j)));
    idx.truncate(k);
    Ok(idx)
}

pub fn select(features: &[f64], indices: &[usize]) -> Vec<f64> {
    indices.iter().map(|&i| features[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: vec![16, 16], epochs: 500, learning_rate: 1e-2, weight_decay: 0.0, seed: 0 }
    }
}

/// Feed-forward binary classifier on standardized features.
#[derive(Debug, Clone)]
pub struct Classifier {
    net: Sequential,
    store: ParamStore,
    feature_mean: Vec<f64>,
    feature_scale: Vec<f64>,
}

impl Classifier {
    /// Full-batch training with binary cross-entropy; labels must contain both classes.
    pub fn fit(features: &[Vec<f64>], labels: &[bool], config: &ClassifierConfig) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(CoreError::Dimension(format!("{} feature rows vs {} labels", features.len(), labels.len())));
        }
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            return Err(CoreError::Invalid("classifier training needs both classes".into()));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(CoreError::Dimension("feature rows must share a positive length".into()));
        }
        let n = features.len() as f64;
        let feature_mean = mean_vector(features);
        let feature_scale = (0..d)
            .map(|k| {
                let sd = (features.iter().map(|f| (f[k] - feature_mean[k]).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        let mut specs = Vec::new();
        let mut width = d;
        for &h in &config.hidden {
            specs.push(LayerSpec::FullyConnected { in_features: width, out_features: h });
            specs.push(LayerSpec::Prelu { channels: h });
            width = h;
        }
        specs.push(LayerSpec::FullyConnected { in_features: width, out_features: 1 });
        let mut store = ParamStore::new();
        let net = Sequential::build("classifier", specs, &mut store, config.seed)?;
        let mut model = Self { net, store, feature_mean, feature_scale };
        let x = model.input(features)?;
        let targets: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let mut adam = Adam::new(AdamConfig { weight_decay: config.weight_decay, ..AdamConfig::default() });
        for _ in 0..config.epochs {
            model.store.zero_grad();
            let mut g = Graph::new();
            let xv = g.constant(x.clone())?;
            let logits = model.net.forward(&mut g, xv, &mut model.store, Mode::Train)?;
            let loss = g.bce_with_logits(logits, &targets)?;
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.store)?;
            adam.step(&mut model.store, config.learning_rate)?;
        }
        Ok(model)
    }

    fn input(&self, features: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.feature_mean.len();
        if features.iter().any(|f| f.len() != d) {
            return Err(CoreError::Dimension(format!("classifier expects {d} features")));
        }
        let data = features
            .iter()
            .flat_map(|f| f.iter().zip(&self.feature_mean).zip(&self.feature_scale).map(|((v, m), s)| (v - m) / s))
            .collect();
        Ok(Tensor::new(vec![features.len(), d], data)?)
    }

    /// Class-1 probabilities.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let x = g.constant(self.input(features)?)?;
        let logits = self.net.forward_eval(&mut g, x, &self.store)?;
        Ok(g.value(logits).data().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
    }
}

/// Ranks starting at 1 with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive scores above a random negative (ties count half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::Dimension(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CoreError::Invalid("AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CoreError::Dimension("correlation needs two aligned vectors of length >= 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoreError::Invalid("correlation of a zero-variance vector".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CoreError::Dimension("correlation needs aligned vectors".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Fraction of `probabilities >= 0.5` that match the labels.
pub fn accuracy(probabilities: &[f64], labels: &[bool]) -> Result<f64> {
    if probabilities.len() != labels.len() || labels.is_empty() {
        return Err(CoreError::Dimension("accuracy needs aligned, non-empty vectors".into()));
    }
    let hits = probabilities.iter().zip(labels).filter(|(&p, &l)| (p >= 0.5) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub pearson_r: f64,
    pub spearman_r: f64,
    pub accuracy: f64,
}

/// All metrics of scores against binary labels (labels enter the correlations as 0/1).
pub fn metrics(scores: &[f64], labels: &[bool]) -> Result<Metrics> {
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    Ok(Metrics {
        auc: auc(scores, labels)?,
        pearson_r: pearson(scores, &y)?,
        spearman_r: spearman(scores, &y)?,
        accuracy: accuracy(scores, labels)?,
    })
}
