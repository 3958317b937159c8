use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Graph handles for every tensor of a [`ParamStore`], addressable by name.
pub struct Bound<'a> {
    store: &'a ParamStore,
    ids: Vec<NodeId>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.store
            .index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound<'_> {
        let ids = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        Bound { store: self, ids }
    }

    /// Records every tensor as a constant, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound<'_> {
        let ids = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        Bound { store: self, ids }
    }

    pub(crate) fn bound_with(&self, ids: Vec<NodeId>) -> Bound<'_> {
        Bound { store: self, ids }
    }

    /// Gradient for each tensor in store order; zeros where none reached it.
    pub fn collect_grads(&self, bound: &Bound<'_>, grads: &super::Grads) -> Vec<Tensor> {
        bound
            .ids
            .iter()
            .zip(&self.tensors)
            .map(|(&id, t)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Element-wise sum of `b` into `a`, for accumulating over a batch.
    pub fn accumulate(a: &mut [Tensor], b: &[Tensor]) {
        for (x, y) in a.iter_mut().zip(b) {
            x.add_assign(y);
        }
    }
}

/// Normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal(shape, std, rng)
}

/// Uniform initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..a) as f32)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}
