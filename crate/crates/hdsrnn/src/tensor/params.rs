//! Named parameter storage shared by layers, optimizers, and checkpoints.
//!
//! Layers register their weights here and keep [`ParamId`] handles; the store
//! owns the values. Registration order is the canonical parameter order used
//! for binding onto tapes, optimizer state, and checkpoint files.

use crate::error::{Error, Result};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// All parameter ids in canonical (registration) order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Register every parameter as a leaf on `tape`, in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self.values.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundParams { ids }
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} tensors, store has {}",
                snapshot.len(),
                self.values.len()
            )));
        }
        for (v, s) in self.values.iter_mut().zip(snapshot) {
            if v.shape() != s.shape() {
                return Err(Error::Contract(format!(
                    "snapshot shape {:?} does not match parameter shape {:?}",
                    s.shape(),
                    v.shape()
                )));
            }
            *v = s.clone();
        }
        Ok(())
    }
}

/// Tape leaves for one forward pass, aligned with the store's order.
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.ids[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.ids
    }
}
