//! Named parameter storage.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::Tensor;

/// All trainable arrays of a model, keyed by dotted names such as
/// `enc2d.conv0.w`. Ordering is lexicographic so serialization is stable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Fan-in-scaled uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, drawn
    /// from a stream keyed by `(seed, name)` so a parameter's initial value
    /// does not depend on which other modules exist.
    pub fn init_uniform(&mut self, seed: u64, name: &str, shape: &[usize], fan_in: usize) {
        self.init_uniform_gain(seed, name, shape, fan_in, 1.0);
    }

    /// As [`init_uniform`](Self::init_uniform) with the bound multiplied by
    /// `gain`; `gain = sqrt(6)` keeps activation variance through ReLU layers.
    pub fn init_uniform_gain(&mut self, seed: u64, name: &str, shape: &[usize], fan_in: usize, gain: f64) {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let mut r = rng::stream(seed, "init", &[rng::derive_seed(0, name, &[])]);
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| r.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}
