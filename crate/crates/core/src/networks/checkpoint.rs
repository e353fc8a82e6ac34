//! Model and training-state persistence on top of the tensor container.
//!
//! Tensors are stored in registration order, followed (for resumable
//! checkpoints) by `best/<name>` snapshots and `adam/m/<i>`, `adam/v/<i>`
//! optimizer moments. The manifest metadata holds a [`CheckpointMeta`].

use std::path::Path;

use deepssm_nn::checkpoint::{self, LayerStack, Manifest, TensorEntry};
use deepssm_nn::{ParamKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::model::{Architecture, BaseDeepSsm, DeepSsm, TlDeepSsm};
use super::train::{TrainConfig, TrainState, TrainStateMeta};
use crate::error::{CoreError, Result};
use crate::volume::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ModelMeta {
    Base { architecture: Architecture, grid: Grid, num_points: usize, num_modes: usize },
    Tl { architecture: Architecture, grid: Grid, num_points: usize, latent_dim: usize, hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub state: TrainStateMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelMeta,
    pub training: Option<TrainingMeta>,
}

pub fn model_meta(model: &DeepSsm) -> ModelMeta {
    match model {
        DeepSsm::Base(m) => ModelMeta::Base {
            architecture: m.architecture.clone(),
            grid: m.grid,
            num_points: m.num_points(),
            num_modes: m.num_modes(),
        },
        DeepSsm::Tl(m) => ModelMeta::Tl {
            architecture: m.architecture.clone(),
            grid: m.grid,
            num_points: m.num_points(),
            latent_dim: m.latent_dim,
            hidden: m.hidden,
        },
    }
}

fn stacks(model: &DeepSsm) -> Vec<LayerStack> {
    let seqs = match model {
        DeepSsm::Base(m) => vec![&m.encoder, &m.fixed],
        DeepSsm::Tl(m) => vec![&m.ae_encoder, &m.ae_decoder, &m.t_flank],
    };
    seqs.into_iter().map(|s| LayerStack { name: s.name().to_owned(), layers: s.specs().to_vec() }).collect()
}

fn entry(name: String, t: &Tensor) -> TensorEntry {
    TensorEntry { name, shape: t.shape().to_vec(), kind: ParamKind::Buffer, requires_grad: false }
}

/// Writes the model, and optionally the training state needed to resume.
pub fn save(path: &Path, model: &DeepSsm, training: Option<(&TrainConfig, &TrainState)>) -> Result<()> {
    let store = model.store();
    let mut entries = checkpoint::store_entries(store);
    let mut tensors: Vec<&Tensor> = store.iter().map(|(_, p)| &p.value).collect();
    let moments;
    if let Some((_, state)) = training {
        if let Some(best) = &state.best {
            for ((_, p), t) in store.iter().zip(best) {
                entries.push(entry(format!("best/{}", p.name), t));
                tensors.push(t);
            }
        }
        moments = state.adam.export_moments();
        for (i, m, _) in &moments {
            entries.push(entry(format!("adam/m/{i}"), m));
            tensors.push(m);
        }
        for (i, _, v) in &moments {
            entries.push(entry(format!("adam/v/{i}"), v));
            tensors.push(v);
        }
    }
    let meta = CheckpointMeta {
        model: model_meta(model),
        training: training.map(|(config, state)| TrainingMeta { config: config.clone(), state: state.meta() }),
    };
    let manifest = Manifest {
        seed: training.map_or(0, |(c, _)| c.seed),
        step: training.map_or(0, |(_, s)| s.adam.steps_taken()),
        stacks: stacks(model),
        tensors: entries,
        metadata: serde_json::to_value(&meta)?,
    };
    checkpoint::save(path, &manifest, &tensors).map_err(|e| at(path, e))
}

fn at(path: &Path, e: deepssm_nn::NnError) -> CoreError {
    match e {
        deepssm_nn::NnError::Io(source) => CoreError::io(path, source),
        other => CoreError::Invalid(format!("checkpoint {}: {other}", path.display())),
    }
}

fn build(meta: &ModelMeta) -> Result<DeepSsm> {
    Ok(match meta {
        ModelMeta::Base { architecture, grid, num_points, num_modes } => {
            DeepSsm::Base(BaseDeepSsm::build(architecture.clone(), *grid, *num_points, *num_modes, 0)?)
        }
        ModelMeta::Tl { architecture, grid, num_points, latent_dim, hidden } => {
            DeepSsm::Tl(TlDeepSsm::build(architecture.clone(), *grid, *num_points, *latent_dim, *hidden, 0)?)
        }
    })
}

fn load_store(store: &mut ParamStore, entries: &[TensorEntry], values: Vec<Tensor>) -> Result<()> {
    let names: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
    store.load_values(&names, values)?;
    for (p, e) in store.params_mut().iter_mut().zip(entries) {
        p.requires_grad = e.requires_grad;
    }
    Ok(())
}

pub struct Loaded {
    pub model: DeepSsm,
    pub training: Option<(TrainConfig, TrainState)>,
}

/// Reads a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<Loaded> {
    let (manifest, tensors) = checkpoint::load(path).map_err(|e| at(path, e))?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.metadata.clone())
        .map_err(|e| CoreError::Invalid(format!("checkpoint {}: bad metadata: {e}", path.display())))?;
    let mut model = build(&meta.model)?;
    let n = model.store().len();
    if tensors.len() < n {
        return Err(CoreError::Invalid(format!("checkpoint {} holds too few tensors", path.display())));
    }
    let mut rest = tensors;
    let extra = rest.split_off(n);
    load_store(model.store_mut(), &manifest.tensors[..n], rest)?;

    let training = match meta.training {
        None => None,
        Some(TrainingMeta { config, state }) => {
            let mut best = Vec::new();
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (e, t) in manifest.tensors[n..].iter().zip(extra) {
                if e.name.starts_with("best/") {
                    best.push(t);
                } else if let Some(i) = e.name.strip_prefix("adam/m/") {
                    m.push((parse_index(i)?, t));
                } else if let Some(i) = e.name.strip_prefix("adam/v/") {
                    v.push((parse_index(i)?, t));
                } else {
                    return Err(CoreError::Invalid(format!("unexpected checkpoint tensor {}", e.name)));
                }
            }
            if m.len() != v.len() || (!best.is_empty() && best.len() != n) {
                return Err(CoreError::Invalid("incomplete training state in checkpoint".into()));
            }
            let moments = m.into_iter().zip(v).map(|((i, m), (_, v))| (i, m, v)).collect();
            let best = if best.is_empty() { None } else { Some(best) };
            let state = TrainState::from_meta(state, config.weight_decay, best, moments);
            Some((config, state))
        }
    };
    Ok(Loaded { model, training })
}

fn parse_index(s: &str) -> Result<usize> {
    s.parse().map_err(|_| CoreError::Invalid(format!("bad optimizer tensor index {s:?}")))
}
