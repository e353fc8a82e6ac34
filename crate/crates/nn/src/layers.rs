use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Mode, Var};
use crate::init::xavier_init_with;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PRELU_INIT: f64 = 0.25;
pub const POOL_FACTOR: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3d { in_channels: usize, out_channels: usize, kernel: usize },
    FullyConnected { in_features: usize, out_features: usize },
    Prelu { channels: usize },
    LeakyRelu { slope: f64 },
    BatchNorm { channels: usize },
    MaxPool3d { factor: usize },
    Flatten,
    /// Linear map whose weight and bias are set externally and never trained.
    FixedLinear { in_features: usize, out_features: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv3d { in_channels, out_channels, kernel } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return Err(NnError::InvalidSpec(format!("conv3d kernel must be odd, got {kernel}")));
                }
                if in_channels == 0 || out_channels == 0 {
                    return Err(NnError::InvalidSpec("conv3d channels must be positive".into()));
                }
            }
            LayerSpec::MaxPool3d { factor } if factor != POOL_FACTOR => {
                return Err(NnError::InvalidSpec(format!("max_pool3d factor must be 2, got {factor}")));
            }
            LayerSpec::FullyConnected { in_features, out_features }
            | LayerSpec::FixedLinear { in_features, out_features }
                if in_features == 0 || out_features == 0 =>
            {
                return Err(NnError::InvalidSpec("linear layers need positive feature counts".into()));
            }
            LayerSpec::Prelu { channels } | LayerSpec::BatchNorm { channels } if channels == 0 => {
                return Err(NnError::InvalidSpec("channel count must be positive".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Conv { w: ParamId, b: ParamId },
    Linear { w: ParamId, b: ParamId },
    Prelu { slope: ParamId },
    LeakyRelu(f64),
    BatchNorm { gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId },
    Pool(usize),
    Flatten,
}

/// A chain of layers whose tensors live in a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Sequential {
    name: String,
    specs: Vec<LayerSpec>,
    slots: Vec<Slot>,
}

impl Sequential {
    /// Registers every tensor of `specs` under `name` and initializes weights
    /// (Xavier uniform for conv/linear weights, zero biases, PReLU slope 0.25,
    /// unit batch-norm scale).
    pub fn build(name: &str, specs: Vec<LayerSpec>, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let p = |s: &str| format!("{name}.{i}.{s}");
            let slot = match *spec {
                LayerSpec::Conv3d { in_channels, out_channels, kernel } => {
                    let w = xavier_init_with(&[out_channels, in_channels, kernel, kernel, kernel], &mut rng);
                    Slot::Conv {
                        w: store.add_weight(p("weight"), w, true),
                        b: store.add_weight(p("bias"), Tensor::zeros(&[out_channels]), true),
                    }
                }
                LayerSpec::FullyConnected { in_features, out_features } => {
                    let w = xavier_init_with(&[out_features, in_features], &mut rng);
                    Slot::Linear {
                        w: store.add_weight(p("weight"), w, true),
                        b: store.add_weight(p("bias"), Tensor::zeros(&[out_features]), true),
                    }
                }
                LayerSpec::FixedLinear { in_features, out_features } => Slot::Linear {
                    w: store.add_weight(p("weight"), Tensor::zeros(&[out_features, in_features]), false),
                    b: store.add_weight(p("bias"), Tensor::zeros(&[out_features]), false),
                },
                LayerSpec::Prelu { channels } => Slot::Prelu {
                    slope: store.add_weight(p("slope"), Tensor::full(&[channels], PRELU_INIT), true),
                },
                LayerSpec::LeakyRelu { slope } => Slot::LeakyRelu(slope),
                LayerSpec::BatchNorm { channels } => Slot::BatchNorm {
                    gamma: store.add_weight(p("gamma"), Tensor::full(&[channels], 1.0), true),
                    beta: store.add_weight(p("beta"), Tensor::zeros(&[channels]), true),
                    mean: store.add_buffer(p("running_mean"), Tensor::zeros(&[channels])),
                    var: store.add_buffer(p("running_var"), Tensor::full(&[channels], 1.0)),
                },
                LayerSpec::MaxPool3d { factor } => Slot::Pool(factor),
                LayerSpec::Flatten => Slot::Flatten,
            };
            slots.push(slot);
        }
        Ok(Self { name: name.to_string(), specs, slots })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Learnable weight ids (excluding fixed layers and buffers).
    pub fn trainable_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        self.all_weight_ids().into_iter().filter(|id| store.get(*id).requires_grad).collect()
    }

    /// Every tensor id this stack owns, buffers included.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.all_weight_ids();
        for s in &self.slots {
            if let Slot::BatchNorm { mean, var, .. } = s {
                ids.push(*mean);
                ids.push(*var);
            }
        }
        ids
    }

    fn all_weight_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.slots {
            match s {
                Slot::Conv { w, b } | Slot::Linear { w, b } => ids.extend([*w, *b]),
                Slot::Prelu { slope } => ids.push(*slope),
                Slot::BatchNorm { gamma, beta, .. } => ids.extend([*gamma, *beta]),
                _ => {}
            }
        }
        ids
    }

    /// Weight and bias ids of the layer at `index`, if it is linear.
    pub fn linear_ids(&self, index: usize) -> Option<(ParamId, ParamId)> {
        match self.slots.get(index)? {
            Slot::Linear { w, b } => Some((*w, *b)),
            _ => None,
        }
    }

    /// Applies every non-normalization slot; batch norm is left to the caller.
    fn apply(slot: &Slot, g: &mut Graph, x: Var, store: &ParamStore) -> Result<Var> {
        match *slot {
            Slot::Conv { w, b } => {
                let (w, b) = (g.param(store, w)?, g.param(store, b)?);
                g.conv3d(x, w, b)
            }
            Slot::Linear { w, b } => {
                let (w, b) = (g.param(store, w)?, g.param(store, b)?);
                g.linear(x, w, b)
            }
            Slot::Prelu { slope } => {
                let s = g.param(store, slope)?;
                g.prelu(x, s)
            }
            Slot::LeakyRelu(s) => g.leaky_relu(x, s),
            Slot::Pool(f) => g.max_pool3d(x, f),
            Slot::Flatten => g.flatten(x),
            Slot::BatchNorm { gamma, beta, mean, var } => {
                let (ga, be) = (g.param(store, gamma)?, g.param(store, beta)?);
                g.batch_norm_eval(x, ga, be, store.value(mean), store.value(var))
            }
        }
    }

    /// Forward pass; training mode updates batch-norm running statistics in `store`.
    pub fn forward(&self, g: &mut Graph, mut x: Var, store: &mut ParamStore, mode: Mode) -> Result<Var> {
        for slot in &self.slots {
            x = match (*slot, mode) {
                (Slot::BatchNorm { gamma, beta, mean, var }, Mode::Train) => {
                    let (ga, be) = (g.param(store, gamma)?, g.param(store, beta)?);
                    g.batch_norm(x, ga, be, store.pair_mut(mean, var), mode)?
                }
                _ => Self::apply(slot, g, x, store)?,
            };
        }
        Ok(x)
    }

    /// Inference-mode forward pass over a shared parameter store.
    pub fn forward_eval(&self, g: &mut Graph, mut x: Var, store: &ParamStore) -> Result<Var> {
        for slot in &self.slots {
            x = Self::apply(slot, g, x, store)?;
        }
        Ok(x)
    }
}
