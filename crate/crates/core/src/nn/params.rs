use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> TensorStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(Error::Config(format!("duplicate tensor name {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(self.entries.len() - 1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Learnable parameters plus non-learnable buffers of a network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerState<T> {
    pub parameters: TensorStore<T>,
    pub buffers: TensorStore<T>,
}

impl<T: Real> LayerState<T> {
    pub fn new() -> Self {
        Self {
            parameters: TensorStore::new(),
            buffers: TensorStore::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        self.parameters.insert(name, t).map(ParamId)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<BufferId> {
        self.buffers.insert(name, t).map(BufferId)
    }

    /// Places every parameter on `g` as a differentiable leaf; the returned
    /// vector is indexed by [`ParamId`].
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.parameters.tensors().map(|t| g.param(t.clone())).collect()
    }
}

/// Forward-pass behaviour of batch normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}
