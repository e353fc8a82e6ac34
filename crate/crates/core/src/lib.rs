//! Statistical shape modelling from volumes: PCA shape models, model-based
//! augmentation, image-to-correspondence networks, evaluation and the
//! downstream shape analyses.

pub mod augment;
pub mod downstream;
pub mod error;
pub mod evaluate;
pub mod kde;
pub mod networks;
pub mod rng;
pub mod shape;
pub mod shape_stats;
pub mod surface;
pub mod synthbench;
pub mod tps;
pub mod volume;

pub use error::{CoreError, Result};
pub use shape::{CorrespondenceSet, Point};
pub use shape_stats::ShapeModel;
pub use volume::{Grid, Volume};
