use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Learnable (or frozen) weight that participates in the graph.
    Weight,
    /// Non-differentiable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
    pub kind: ParamKind,
}

/// Owns every tensor of a model in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_weight(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> ParamId {
        self.push(name.into(), value, requires_grad, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false, ParamKind::Buffer)
    }

    fn push(&mut self, name: String, value: Tensor, requires_grad: bool, kind: ParamKind) -> ParamId {
        self.params.push(Parameter { name, value, grad: None, requires_grad, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Mutable access to two distinct entries at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor, &mut Tensor) {
        assert_ne!(a, b, "pair_mut needs distinct ids");
        if a.0 < b.0 {
            let (lo, hi) = self.params.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.params.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn set_requires_grad(&mut self, ids: &[ParamId], flag: bool) {
        for id in ids {
            let p = &mut self.params[id.0];
            if p.kind == ParamKind::Weight {
                p.requires_grad = flag;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.len() {
            return Err(NnError::Shape(format!(
                "gradient for {} has {} values, parameter has {}",
                p.name,
                grad.len(),
                p.value.len()
            )));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => p.grad = Some(Tensor::new(p.value.shape().to_vec(), grad.to_vec())?),
        }
        Ok(())
    }

    /// Combined checksum over the listed tensors.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        ids.iter().fold(0u64, |acc, id| {
            acc.rotate_left(7) ^ self.params[id.0].value.checksum()
        })
    }

    /// Replaces all values from a list in registration order, checking names and shapes.
    pub fn load_values(&mut self, names: &[String], values: Vec<Tensor>) -> Result<()> {
        if names.len() != self.params.len() || values.len() != self.params.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for ((p, name), v) in self.params.iter_mut().zip(names).zip(values) {
            if &p.name != name || p.value.shape() != v.shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor {name} {:?} does not match model tensor {} {:?}",
                    v.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }
}
