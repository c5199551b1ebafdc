use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
}

/// Named, ordered collection of model weights.
///
/// Registration order is stable and defines checkpoint layout. A parameter
/// is trainable iff its tensor has `requires_grad` set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let tensor = tensor.with_grad();
        self.entries.push(Entry { name, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].tensor.requires_grad()
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.entries[id.0].tensor.set_requires_grad(on);
    }

    /// Replaces the values of `id`, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.entries[id.0].tensor;
        if t.numel() != values.len() {
            return Err(Error::Shape {
                op: "set_values",
                lhs: t.shape().to_vec(),
                rhs: vec![values.len()],
            });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            if let Some(g) = e.tensor.grad_mut() {
                g.fill(0.0);
            }
        }
    }

    /// Adds `grads` into the stored gradient buffers of trainable parameters.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (e, g) in self.entries.iter_mut().zip(&grads.by_param) {
            if let (Some(dst), Some(src)) = (e.tensor.grad_mut(), g.as_ref()) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    /// Global L2 norm over all stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) by_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
