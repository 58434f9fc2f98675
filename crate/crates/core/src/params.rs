//! Named parameter storage and initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Ordered, named parameter tensors. A slot index is stable for the lifetime
/// of the store.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, value: Tensor<T>) -> usize {
        self.entries.push((name.to_string(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor<T> {
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.entries[slot].1
    }

    pub fn set(&mut self, slot: usize, value: Tensor<T>) {
        self.entries[slot].1 = value;
    }

    pub fn entry(&self, slot: usize) -> (&str, &Tensor<T>) {
        let (n, t) = &self.entries[slot];
        (n, t)
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Adds every parameter to `g` as a tracked leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries
            .iter()
            .enumerate()
            .map(|(slot, (_, t))| g.param(slot, t))
            .collect()
    }

    /// Adds every parameter to `g` as a constant; used for inference.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| g.constant(t.clone()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}

/// Kaiming-normal weights with fan-in scaling, `std = sqrt(2 / fan_in)`.
pub fn kaiming<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}
