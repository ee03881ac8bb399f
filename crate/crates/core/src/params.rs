//! Named learnable tensors and their binding into a [`Graph`].

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Per-parameter learning-rate multiplier.
    pub lr_mult: Scalar,
}

/// Every learnable weight of a model, addressable by name or id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add_scaled(name, value, 1.0)
    }

    pub fn add_scaled(&mut self, name: impl Into<String>, value: Tensor, lr_mult: Scalar) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            lr_mult,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.to_string()).collect()
    }

    /// Zero-filled gradient buffers matching every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect()
    }
}

/// Lazily binds parameters as graph leaves for one forward pass.
#[derive(Debug)]
pub struct Binder<'p> {
    params: &'p ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Binder<'p> {
    /// `trainable` decides whether bound leaves receive gradients.
    pub fn new(params: &'p ParamStore, trainable: bool) -> Self {
        Self {
            params,
            vars: vec![None; params.len()],
            trainable,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn bind(&mut self, graph: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = graph.leaf(self.params.get(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Adds `scale * grad` of every bound parameter into `acc`.
    pub fn accumulate_grads(&self, graph: &Graph, acc: &mut [Tensor], scale: Scalar) {
        for (slot, var) in acc.iter_mut().zip(&self.vars) {
            let Some(g) = var.and_then(|v| graph.grad(v)) else {
                continue;
            };
            for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }
}
