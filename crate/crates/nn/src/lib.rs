//! Deterministic double-precision tensor engine with just enough layers to
//! train volumetric shape regressors: 3-D convolution, max pooling, batch
//! normalization, (leaky/parametric) ReLU, fully connected layers, Adam with
//! cosine annealing, and a flat checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Graph, Mode, Var};
pub use layers::{LayerSpec, Sequential};
pub use optim::{Adam, AdamConfig, Schedule};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::Tensor;
