//! Attribute fusion: `x' = act(W [x; a] + b)`, a dimension reduction that
//! conditions the reconstruction path on the face attribute vector.
//!
//! With attributes disabled the map is `act(W x + b)` and the attribute vector
//! never enters the graph.

use crate::domain::{AttributeVector, Embedding, Modality};
use crate::encoders::{init_linear, linear, RELU_GAIN};
use crate::graph::{Graph, Var};
use crate::model::ModelError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub embed_dim: usize,
    pub attrs: usize,
    pub out_dim: usize,
    pub use_attributes: bool,
    /// One map for both modalities instead of one each.
    pub shared: bool,
    pub activation: Activation,
}

impl Fusion {
    pub fn prefix(&self, m: Modality) -> String {
        if self.shared {
            "fusion.shared".to_string()
        } else {
            format!("fusion.{m}")
        }
    }

    pub fn in_width(&self) -> usize {
        self.embed_dim + if self.use_attributes { self.attrs } else { 0 }
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        for m in [Modality::Image, Modality::Points] {
            let p = self.prefix(m);
            if !store.contains(&format!("{p}.w")) {
                let gain = if self.activation == Activation::Relu { RELU_GAIN } else { 1.0 };
                init_linear(store, seed, &p, self.in_width(), self.out_dim, gain);
            }
        }
    }

    /// `x: [N, q]`, `attrs: [N, a]` -> `[N, q']`.
    pub fn forward(&self, g: &mut Graph, m: Modality, x: Var, attrs: Var) -> Var {
        let input = if self.use_attributes { g.concat_cols(x, attrs) } else { x };
        let y = linear(g, &self.prefix(m), input);
        match self.activation {
            Activation::Relu => g.relu(y),
            Activation::Identity => y,
        }
    }

    pub fn fuse_attributes(
        &self,
        params: &ParamStore,
        m: Modality,
        x: &Embedding,
        attrs: &AttributeVector,
    ) -> Result<Embedding, ModelError> {
        if x.len() != self.embed_dim {
            return Err(ModelError::InputShape(format!(
                "embedding has length {}, fusion expects {}",
                x.len(),
                self.embed_dim
            )));
        }
        if attrs.0.len() != self.attrs {
            return Err(ModelError::InputShape(format!(
                "attribute vector has length {}, fusion expects {}",
                attrs.0.len(),
                self.attrs
            )));
        }
        let mut g = Graph::new(params);
        let xv = g.input(Tensor::new(vec![1, x.len()], x.0.clone()));
        let av = g.input(Tensor::new(vec![1, attrs.0.len()], attrs.0.clone()));
        let y = self.forward(&mut g, m, xv, av);
        Ok(Embedding(g.value(y).data().to_vec()))
    }
}
