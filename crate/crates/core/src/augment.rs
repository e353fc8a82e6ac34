//! Model-based augmentation: sample PCA scores from the kernel density, rebuild
//! the correspondences, and warp the parent image onto them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::kde::KdeModel;
use crate::shape::CorrespondenceSet;
use crate::shape_stats::ShapeModel;
use crate::tps::{default_lambda, warp_volume, TpsWarp};
use crate::volume::Volume;

/// Background intensity for samples falling outside the parent volume.
pub const BACKGROUND: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub volume: Volume,
    pub correspondences: CorrespondenceSet,
    pub scores: Vec<f64>,
    /// Index of the training sample whose kernel produced the draw.
    pub parent_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub count: usize,
    pub seed: u64,
    /// TPS regularization; `None` uses [`default_lambda`] of each sampled shape.
    pub lambda: Option<f64>,
}

/// Shape model over every mode with nonzero variance: `N - 1` modes for a full-rank population,
/// fewer when the shapes span a smaller subspace.
pub fn augmentation_model(shapes: &[CorrespondenceSet]) -> Result<ShapeModel> {
    let full = ShapeModel::fit_full(shapes)?;
    let rank = full.eigenvalues.iter().take_while(|&&l| l > 0.0).count();
    if rank == 0 {
        return Err(CoreError::Invalid("training shapes are identical; nothing to augment".into()));
    }
    full.truncated(rank)
}

/// Fits the density over the training scores of `model` (which should keep all `N - 1` modes).
pub fn fit_score_density(model: &ShapeModel, shapes: &[CorrespondenceSet]) -> Result<KdeModel> {
    let scores = shapes.iter().map(|s| model.project(s)).collect::<Result<Vec<_>>>()?;
    KdeModel::fit(scores)
}

/// Produces one augmented sample for draw `index`.
pub fn augment_one(
    images: &[Volume],
    shapes: &[CorrespondenceSet],
    model: &ShapeModel,
    kde: &KdeModel,
    config: &AugmentConfig,
    index: usize,
) -> Result<AugmentedSample> {
    let (scores, parent) = kde.sample(config.seed, index as u64);
    let target = model.reconstruct(&scores, format!("aug_{index:05}"))?;
    let lambda = config.lambda.unwrap_or_else(|| default_lambda(&target.points));
    // pull-back: map the new shape's space into the parent's so every output voxel is defined
    let warp = TpsWarp::fit(&target.points, &shapes[parent].points, lambda)
        .map_err(|e| CoreError::Invalid(format!("augmentation draw {index}: {e}")))?;
    let parent_img = &images[parent];
    let volume = warp_volume(&warp, parent_img, parent_img.grid, BACKGROUND)?;
    Ok(AugmentedSample { volume, correspondences: target, scores, parent_id: parent })
}

pub fn augment_population(
    images: &[Volume],
    shapes: &[CorrespondenceSet],
    model: &ShapeModel,
    kde: &KdeModel,
    config: &AugmentConfig,
) -> Result<Vec<AugmentedSample>> {
    if config.count == 0 {
        return Err(CoreError::Invalid("augmentation count must be >= 1".into()));
    }
    if images.len() != shapes.len() || shapes.len() != kde.len() {
        return Err(CoreError::Dimension(format!(
            "{} images, {} shapes, {} density kernels",
            images.len(),
            shapes.len(),
            kde.len()
        )));
    }
    if kde.dim() != model.num_modes() {
        return Err(CoreError::Dimension(format!("density over {} modes, model has {}", kde.dim(), model.num_modes())));
    }
    (0..config.count).into_par_iter().map(|i| augment_one(images, shapes, model, kde, config, i)).collect()
}
