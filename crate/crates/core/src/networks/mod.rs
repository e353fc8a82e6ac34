//! Image-to-correspondence networks, their losses and training.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod train;

pub use loss::{FocalContext, FocalParams, PairLoss};
pub use model::{Architecture, BaseDeepSsm, DeepSsm, Inference, TlDeepSsm};
pub use train::{train_base, train_tl, BaseTarget, HistoryRow, Progress, TrainConfig, Trainer, TrainingSet, Variant};
