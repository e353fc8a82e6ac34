//! Parameter checkpoint container.
//!
//! Layout of a checkpoint file:
//!
//! | bytes          | content                                             |
//! |----------------|-----------------------------------------------------|
//! | 8              | magic `DSSMCKP1`                                    |
//! | 8              | manifest length `L`, little-endian `u64`            |
//! | `L`            | UTF-8 JSON [`Manifest`]                             |
//! | rest           | each tensor as little-endian `f64`, manifest order  |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::LayerSpec;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSSMCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub step: u64,
    pub stacks: Vec<LayerStack>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form model description (architecture variant, input grid, ...).
    pub metadata: serde_json::Value,
}

impl Manifest {
    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors.iter().map(|t| t.name.clone()).collect()
    }
}

/// Entries describing every tensor in `store`, in registration order.
pub fn store_entries(store: &ParamStore) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|(_, p)| TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            kind: p.kind,
            requires_grad: p.requires_grad,
        })
        .collect()
}

pub fn encode(manifest: &Manifest, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    if manifest.tensors.len() != tensors.len() {
        return Err(NnError::Checkpoint(format!(
            "manifest lists {} tensors but {} were given",
            manifest.tensors.len(),
            tensors.len()
        )));
    }
    for (e, t) in manifest.tensors.iter().zip(tensors) {
        if e.shape != t.shape() {
            return Err(NnError::Checkpoint(format!("tensor {} shape mismatch", e.name)));
        }
    }
    let json = serde_json::to_vec(manifest)?;
    let total: usize = tensors.iter().map(|t| t.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<Tensor>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(NnError::Checkpoint("missing DSSMCKP1 header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| NnError::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let mut offset = 16 + len;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(offset..offset + n * 8)
            .ok_or_else(|| NnError::Checkpoint(format!("truncated data for {}", e.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
        offset += n * 8;
    }
    if offset != bytes.len() {
        return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((manifest, tensors))
}

pub fn save(path: &Path, manifest: &Manifest, tensors: &[&Tensor]) -> Result<()> {
    let bytes = encode(manifest, tensors)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    decode(&fs::read(path)?)
}
