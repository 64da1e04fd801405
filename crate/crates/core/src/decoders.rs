//! Decoders for the test-time-missing modality.
//!
//! The image decoder reshapes a fused embedding to a `q' x 1 x 1` map and runs
//! a chain of stride-2 transposed convolutions (batch-norm + ReLU between,
//! sigmoid at the end). The point decoder inverts the encoder's max-pool with a
//! Gaussian seed, `seed[i, k] = min(g[i, k], x[k])` with `g ~ N(0, 1)`, then
//! applies a pointwise MLP (kernel-1 transposed convolutions) down to `F`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{Embedding, ImageSample, PointCloudSample};
use crate::encoders::{init_linear, linear, RELU_GAIN};
use crate::graph::{Graph, Var};
use crate::model::ModelError;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDecoderSpec {
    pub kernels: Vec<usize>,
    pub stride: usize,
    pub paddings: Vec<usize>,
    pub channels: Vec<usize>,
}

impl Default for ImageDecoderSpec {
    /// 1 -> 4 -> 8 -> 16 -> 32.
    fn default() -> Self {
        Self { kernels: vec![4; 4], stride: 2, paddings: vec![0, 1, 1, 1], channels: vec![64, 32, 16, 3] }
    }
}

impl ImageDecoderSpec {
    /// 1 -> 7 -> 14 -> 28 -> 56 -> 112 -> 224 with 3 output channels.
    pub fn reference() -> Self {
        Self {
            kernels: vec![7, 4, 4, 4, 4, 4],
            stride: 2,
            paddings: vec![0, 1, 1, 1, 1, 1],
            channels: vec![256, 128, 128, 64, 32, 3],
        }
    }

    /// Spatial side length after each layer, starting from a 1x1 map.
    pub fn output_sizes(&self) -> Vec<usize> {
        let mut side = 1usize;
        self.kernels
            .iter()
            .zip(&self.paddings)
            .map(|(&k, &p)| {
                side = ((side - 1) * self.stride + k).saturating_sub(2 * p);
                side
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.kernels.len();
        if n == 0 || self.paddings.len() != n || self.channels.len() != n {
            return Err("decoder2d kernels, paddings and channels must be non-empty and of equal length".into());
        }
        if self.stride == 0 || self.kernels.contains(&0) || self.channels.contains(&0) {
            return Err("decoder2d sizes must be positive".into());
        }
        if self.output_sizes().contains(&0) {
            return Err("decoder2d padding collapses the feature map".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointDecoderSpec {
    /// Widths of the pointwise layers between the seed and the `F` outputs.
    pub hidden: Vec<usize>,
}

impl Default for PointDecoderSpec {
    fn default() -> Self {
        Self { hidden: vec![32, 16] }
    }
}

impl PointDecoderSpec {
    /// 1024 -> 256 -> 64 -> F.
    pub fn reference() -> Self {
        Self { hidden: vec![256, 64] }
    }
}

#[derive(Clone, Debug)]
pub struct ImageDecoder {
    pub spec: ImageDecoderSpec,
    pub in_dim: usize,
}

impl ImageDecoder {
    pub const PREFIX: &'static str = "dec2d";

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let p = Self::PREFIX;
        let mut cin = self.in_dim;
        let last = self.spec.channels.len() - 1;
        for (i, (&k, &cout)) in self.spec.kernels.iter().zip(&self.spec.channels).enumerate() {
            store.init_uniform(seed, &format!("{p}.deconv{i}.w"), &[cin, cout, k, k], cin * k * k);
            store.init_uniform(seed, &format!("{p}.deconv{i}.b"), &[cout], cin * k * k);
            if i < last {
                store.init_const(&format!("{p}.bn{i}.gamma"), &[cout], 1.0);
                store.init_const(&format!("{p}.bn{i}.beta"), &[cout], 0.0);
            }
            cin = cout;
        }
    }

    /// `[N, q'] -> [N, C, H, W]`. Batch norm always normalizes with the
    /// statistics of the batch at hand (the decoder exists only for training).
    pub fn forward(&self, g: &mut Graph, fused: Var) -> Var {
        let p = Self::PREFIX;
        let (n, q) = g.value(fused).dims2();
        let mut x = g.reshape(fused, &[n, q, 1, 1]);
        let last = self.spec.channels.len() - 1;
        for i in 0..=last {
            let w = g.param(&format!("{p}.deconv{i}.w"));
            let b = g.param(&format!("{p}.deconv{i}.b"));
            x = g.conv_transpose2d(x, w, b, self.spec.stride, self.spec.paddings[i]);
            if i < last {
                let gamma = g.param(&format!("{p}.bn{i}.gamma"));
                let beta = g.param(&format!("{p}.bn{i}.beta"));
                x = g.batch_norm(x, gamma, beta);
                x = g.relu(x);
            } else {
                x = g.sigmoid(x);
            }
        }
        x
    }

    pub fn decode_to_image(&self, params: &ParamStore, xp: &Embedding) -> Result<ImageSample, ModelError> {
        if xp.len() != self.in_dim {
            return Err(ModelError::InputShape(format!(
                "fused embedding has length {}, decoder expects {}",
                xp.len(),
                self.in_dim
            )));
        }
        let mut g = Graph::new(params);
        let x = g.input(Tensor::new(vec![1, xp.len()], xp.0.clone()));
        let y = self.forward(&mut g, x);
        let (_, c, h, w) = g.value(y).dims4();
        Ok(ImageSample::new(h, w, c, g.value(y).data().to_vec()))
    }
}

/// `[rows, k]` standard-normal draws in row-major order.
pub fn normal_noise(rng: &mut Rng, rows: usize, k: usize) -> Tensor {
    Tensor::new(vec![rows, k], (0..rows * k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Seed array with entry `(i, k) = min(g[i, k], x[k])`.
pub fn gaussian_seed(x: &Embedding, n: usize, rng: &mut Rng) -> Tensor {
    let noise = normal_noise(rng, n, x.len());
    let data = noise
        .data()
        .chunks(x.len().max(1))
        .flat_map(|row| row.iter().zip(&x.0).map(|(&g, &xk)| g.min(xk)))
        .collect();
    Tensor::new(vec![n, x.len()], data)
}

#[derive(Clone, Debug)]
pub struct PointDecoder {
    pub spec: PointDecoderSpec,
    pub in_dim: usize,
    pub point_dim: usize,
}

impl PointDecoder {
    pub const PREFIX: &'static str = "dec3d";

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim];
        w.extend(&self.spec.hidden);
        w.push(self.point_dim);
        w
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let widths = self.widths();
        let layers = widths.len() - 1;
        for (i, pair) in widths.windows(2).enumerate() {
            let gain = if i + 1 < layers { RELU_GAIN } else { 1.0 };
            init_linear(store, seed, &format!("{}.l{i}", Self::PREFIX), pair[0], pair[1], gain);
        }
    }

    /// `fused: [N, q']`, `noise: [N * n, q']` -> `[N * n, F]`.
    pub fn forward(&self, g: &mut Graph, fused: Var, noise: &Tensor, n: usize) -> Var {
        let mut h = g.gauss_min(fused, noise, n);
        let layers = self.widths().len() - 1;
        for i in 0..layers {
            h = linear(g, &format!("{}.l{i}", Self::PREFIX), h);
            if i + 1 < layers {
                h = g.relu(h);
            }
        }
        h
    }

    /// Pointwise layers applied to a precomputed seed array.
    pub fn decode_seed(&self, params: &ParamStore, seed: &Tensor) -> PointCloudSample {
        let mut g = Graph::new(params);
        let mut h = g.input(seed.clone());
        let layers = self.widths().len() - 1;
        for i in 0..layers {
            h = linear(&mut g, &format!("{}.l{i}", Self::PREFIX), h);
            if i + 1 < layers {
                h = g.relu(h);
            }
        }
        PointCloudSample::new(self.point_dim, g.value(h).data().to_vec())
    }

    pub fn decode_to_points(
        &self,
        params: &ParamStore,
        xp: &Embedding,
        n: usize,
        rng: &mut Rng,
    ) -> Result<PointCloudSample, ModelError> {
        if n == 0 {
            return Err(ModelError::InputShape("cannot decode to zero points".into()));
        }
        if xp.len() != self.in_dim {
            return Err(ModelError::InputShape(format!(
                "fused embedding has length {}, decoder expects {}",
                xp.len(),
                self.in_dim
            )));
        }
        Ok(self.decode_seed(params, &gaussian_seed(xp, n, rng)))
    }
}
