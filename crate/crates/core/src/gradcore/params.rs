use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Named trainable slices, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    slices: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.slices.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slices.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slices.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slices.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.slices.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.slices.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Absorbs every slice of `other`, replacing same-named ones.
    pub fn extend(&mut self, other: ParamStore) {
        self.slices.extend(other.slices);
    }

    /// Scalar count per slice, in iteration order.
    pub fn counts(&self) -> Vec<(String, usize)> {
        self.slices.iter().map(|(k, v)| (k.clone(), v.numel())).collect()
    }

    pub fn total_count(&self) -> usize {
        self.slices.values().map(Tensor::numel).sum()
    }

    /// Scalar count of the slices whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.slices.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.numel()).sum()
    }

    /// Records every slice as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let nodes = self
            .slices
            .iter()
            .map(|(k, v)| {
                let id = if trainable { tape.var(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), id)
            })
            .collect();
        BoundParams { nodes }
    }

    /// Same names, zero values.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore { slices: self.slices.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    /// `self += alpha · other` over shared names.
    pub fn axpy(&mut self, alpha: f64, other: &ParamStore) {
        for (k, v) in self.slices.iter_mut() {
            if let Some(o) = other.slices.get(k) {
                v.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += alpha * b);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices.values().all(Tensor::is_finite)
    }
}

/// Tape nodes of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    nodes: BTreeMap<String, NodeId>,
}

impl FromIterator<(String, NodeId)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, NodeId)>>(iter: I) -> Self {
        BoundParams { nodes: iter.into_iter().collect() }
    }
}

impl BoundParams {
    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Collects the gradient of every bound slice into a store.
    pub fn gradients(&self, grads: &Gradients, tape: &Tape) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, id) in &self.nodes {
            let g = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*id)));
            out.insert(k.clone(), g);
        }
        out
    }
}

/// Zero-mean Gaussian tensor with standard deviation `std`.
pub fn normal_tensor<R: Rng>(rng: &mut R, shape: Shape, std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}
