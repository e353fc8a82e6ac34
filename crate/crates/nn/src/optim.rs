use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    CosineAnnealing { total_steps: u64 },
}

impl Schedule {
    /// Learning rate at `step`. The cosine schedule anneals to zero at `total_steps`
    /// and is positive for every earlier step.
    pub fn rate(&self, initial: f64, step: u64) -> f64 {
        match *self {
            Schedule::Constant => initial,
            Schedule::CosineAnnealing { total_steps } => {
                let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
                0.5 * initial * (1.0 + (PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: DEFAULT_WEIGHT_DECAY }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

/// One Adam update of a single tensor. `t` is the 1-based step used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    config: &AdamConfig,
    lr: f64,
    t: u64,
) {
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] + config.weight_decay * param[i];
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + config.eps);
    }
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable weight that has a gradient.
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if p.requires_grad && !g.all_finite() {
                    return Err(NnError::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.step;
        let config = self.config;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.requires_grad || p.kind != ParamKind::Weight {
                continue;
            }
            let Some(g) = &p.grad else { continue };
            let n = p.value.len();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            adam_update(p.value.data_mut(), g.data(), m, v, &config, lr, t);
        }
        Ok(())
    }

    /// Moment tensors for persistence: `(param index, m, v)`.
    pub fn export_moments(&self) -> Vec<(usize, Tensor, Tensor)> {
        self.moments
            .iter()
            .enumerate()
            .filter_map(|(i, mv)| {
                mv.as_ref()
                    .map(|(m, v)| (i, Tensor::from_vec(m.clone()), Tensor::from_vec(v.clone())))
            })
            .collect()
    }

    pub fn restore(config: AdamConfig, step: u64, moments: Vec<(usize, Tensor, Tensor)>) -> Self {
        let len = moments.iter().map(|(i, _, _)| i + 1).max().unwrap_or(0);
        let mut slots = vec![None; len];
        for (i, m, v) in moments {
            slots[i] = Some((m.into_data(), v.into_data()));
        }
        Self { config, step, moments: slots }
    }
}
