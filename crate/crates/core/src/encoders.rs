//! Modality encoders and classifier heads.
//!
//! The image encoder is a convolutional backbone, spatial mean pooling and an
//! affine projection to the shared embedding width `q`. The point encoder is a
//! PointNet: optional T-Net spatial transform, a shared per-point MLP,
//! max-pooling over points and the same kind of projection.

use serde::{Deserialize, Serialize};

use crate::domain::{Embedding, ImageSample, Modality, PointCloudSample};
use crate::graph::{Graph, Var};
use crate::model::ModelError;
use crate::norm::{init_norm, norm_layer};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backbone", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ImageEncoderSpec {
    /// Blocks of 3x3 stride-2 convolution + ReLU.
    SmallCnn { channels: Vec<usize> },
    /// Residual network of basic blocks (two 3x3 convolutions and an identity
    /// or 1x1 strided shortcut). Every stage after the first halves the
    /// resolution.
    #[serde(rename = "resnet18-like")]
    Resnet18Like {
        stem_channels: usize,
        stem_kernel: usize,
        stem_stride: usize,
        stages: Vec<usize>,
        blocks_per_stage: usize,
    },
}

impl Default for ImageEncoderSpec {
    fn default() -> Self {
        ImageEncoderSpec::SmallCnn { channels: vec![8, 16, 32, 32] }
    }
}

impl ImageEncoderSpec {
    /// ResNet-18 layout: 64-channel stem, four stages of two basic blocks.
    pub fn resnet18_like() -> Self {
        ImageEncoderSpec::Resnet18Like {
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stages: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
        }
    }

    pub fn pooled_width(&self) -> usize {
        match self {
            ImageEncoderSpec::SmallCnn { channels } => *channels.last().expect("non-empty"),
            ImageEncoderSpec::Resnet18Like { stages, stem_channels, .. } => *stages.last().unwrap_or(stem_channels),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            ImageEncoderSpec::SmallCnn { channels } if channels.is_empty() || channels.contains(&0) => {
                Err("encoder2d.channels must be non-empty and positive".into())
            }
            ImageEncoderSpec::Resnet18Like { stem_channels, stem_kernel, stem_stride, stages, blocks_per_stage }
                if *stem_channels == 0
                    || *stem_kernel == 0
                    || *stem_stride == 0
                    || *blocks_per_stage == 0
                    || stages.contains(&0) =>
            {
                Err("encoder2d residual sizes must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointEncoderSpec {
    pub spatial_transform: bool,
    /// Per-point widths of the T-Net feature MLP.
    pub tnet_widths: Vec<usize>,
    /// Per-point widths of the shared MLP; the last one is max-pooled.
    pub mlp_widths: Vec<usize>,
}

impl Default for PointEncoderSpec {
    fn default() -> Self {
        Self { spatial_transform: true, tnet_widths: vec![16, 32], mlp_widths: vec![32, 64, 256] }
    }
}

impl PointEncoderSpec {
    /// 64 -> 128 -> 1024 shared MLP of the original PointNet.
    pub fn reference() -> Self {
        Self { spatial_transform: true, tnet_widths: vec![64, 128, 1024], mlp_widths: vec![64, 128, 1024] }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.mlp_widths.is_empty() || self.mlp_widths.contains(&0) || self.tnet_widths.contains(&0) {
            return Err("encoder3d widths must be non-empty and positive".into());
        }
        if self.spatial_transform && self.tnet_widths.is_empty() {
            return Err("encoder3d.tnet_widths must be non-empty when spatial_transform is on".into());
        }
        Ok(())
    }
}

/// Weight gain for maps followed by a ReLU.
pub(crate) const RELU_GAIN: f64 = 2.449_489_742_783_178;

pub(crate) fn init_conv(store: &mut ParamStore, seed: u64, prefix: &str, cin: usize, cout: usize, k: usize) {
    store.init_uniform_gain(seed, &format!("{prefix}.w"), &[cout, cin, k, k], cin * k * k, RELU_GAIN);
    store.init_uniform(seed, &format!("{prefix}.b"), &[cout], cin * k * k);
}

/// Affine map `din -> dout`; `gain` scales the weight bound only.
pub(crate) fn init_linear(store: &mut ParamStore, seed: u64, prefix: &str, din: usize, dout: usize, gain: f64) {
    store.init_uniform_gain(seed, &format!("{prefix}.w"), &[din, dout], din, gain);
    store.init_uniform(seed, &format!("{prefix}.b"), &[dout], din);
}

pub(crate) fn linear(g: &mut Graph, prefix: &str, x: Var) -> Var {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    g.linear(x, w, Some(b))
}

/// Convolution followed by its normalization layer `<prefix>.bn`.
fn conv_norm(g: &mut Graph, prefix: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let y = g.conv2d(x, w, b, stride, pad);
    norm_layer(g, &format!("{prefix}.bn"), y)
}

fn linear_norm(g: &mut Graph, prefix: &str, x: Var) -> Var {
    let y = linear(g, prefix, x);
    norm_layer(g, &format!("{prefix}.bn"), y)
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub spec: ImageEncoderSpec,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub normalize: bool,
}

impl ImageEncoder {
    pub const PREFIX: &'static str = "enc2d";

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let p = Self::PREFIX;
        match &self.spec {
            ImageEncoderSpec::SmallCnn { channels } => {
                let mut cin = self.in_channels;
                for (i, &c) in channels.iter().enumerate() {
                    init_conv(store, seed, &format!("{p}.conv{i}"), cin, c, 3);
                    init_norm(store, &format!("{p}.conv{i}.bn"), c);
                    cin = c;
                }
            }
            ImageEncoderSpec::Resnet18Like { stem_channels, stem_kernel, stages, blocks_per_stage, .. } => {
                init_conv(store, seed, &format!("{p}.stem"), self.in_channels, *stem_channels, *stem_kernel);
                init_norm(store, &format!("{p}.stem.bn"), *stem_channels);
                let mut cin = *stem_channels;
                for (s, &c) in stages.iter().enumerate() {
                    for b in 0..*blocks_per_stage {
                        let name = format!("{p}.s{s}.b{b}");
                        init_conv(store, seed, &format!("{name}.conv1"), cin, c, 3);
                        init_norm(store, &format!("{name}.conv1.bn"), c);
                        init_conv(store, seed, &format!("{name}.conv2"), c, c, 3);
                        init_norm(store, &format!("{name}.conv2.bn"), c);
                        if b == 0 && (s > 0 || cin != c) {
                            init_conv(store, seed, &format!("{name}.short"), cin, c, 1);
                            init_norm(store, &format!("{name}.short.bn"), c);
                        }
                        cin = c;
                    }
                }
            }
        }
        init_linear(store, seed, &format!("{p}.proj"), self.spec.pooled_width(), self.embed_dim, 1.0);
    }

    /// `[N, C, H, W] -> [N, q]`.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Var {
        let p = Self::PREFIX;
        let mut x = images;
        match &self.spec {
            ImageEncoderSpec::SmallCnn { channels } => {
                for i in 0..channels.len() {
                    x = conv_norm(g, &format!("{p}.conv{i}"), x, 2, 1);
                    x = g.relu(x);
                }
            }
            ImageEncoderSpec::Resnet18Like { stem_kernel, stem_stride, stages, blocks_per_stage, .. } => {
                x = conv_norm(g, &format!("{p}.stem"), x, *stem_stride, stem_kernel / 2);
                x = g.relu(x);
                for s in 0..stages.len() {
                    for b in 0..*blocks_per_stage {
                        let name = format!("{p}.s{s}.b{b}");
                        let stride = if b == 0 && s > 0 { 2 } else { 1 };
                        let mut y = conv_norm(g, &format!("{name}.conv1"), x, stride, 1);
                        y = g.relu(y);
                        y = conv_norm(g, &format!("{name}.conv2"), y, 1, 1);
                        let short_name = format!("{name}.short");
                        let shortcut = if g.params().contains(&format!("{short_name}.w")) {
                            conv_norm(g, &short_name, x, stride, 0)
                        } else {
                            x
                        };
                        let sum = g.add(y, shortcut);
                        x = g.relu(sum);
                    }
                }
            }
        }
        let pooled = g.mean_pool2d(x);
        let emb = linear(g, &format!("{p}.proj"), pooled);
        if self.normalize {
            g.normalize_rows(emb)
        } else {
            emb
        }
    }

    /// Embeds one image with the given parameters.
    pub fn encode(&self, params: &ParamStore, img: &ImageSample) -> Result<Embedding, ModelError> {
        if img.channels != self.in_channels {
            return Err(ModelError::InputShape(format!(
                "image has {} channels, encoder expects {}",
                img.channels, self.in_channels
            )));
        }
        let mut g = Graph::inference(params);
        let x = g.input(Tensor::new(vec![1, img.channels, img.height, img.width], img.pixels.clone()));
        let e = self.forward(&mut g, x);
        Ok(Embedding(g.value(e).data().to_vec()))
    }
}

#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub spec: PointEncoderSpec,
    pub point_dim: usize,
    pub embed_dim: usize,
    pub normalize: bool,
}

impl PointEncoder {
    pub const PREFIX: &'static str = "enc3d";

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let p = Self::PREFIX;
        let f = self.point_dim;
        if self.spec.spatial_transform {
            let mut din = f;
            for (i, &w) in self.spec.tnet_widths.iter().enumerate() {
                init_linear(store, seed, &format!("{p}.tnet.l{i}"), din, w, RELU_GAIN);
                init_norm(store, &format!("{p}.tnet.l{i}.bn"), w);
                din = w;
            }
            // starts as the identity transform
            store.init_const(&format!("{p}.tnet.out.w"), &[din, f * f], 0.0);
            let mut eye = Tensor::zeros(&[f * f]);
            (0..f).for_each(|i| eye.data_mut()[i * f + i] = 1.0);
            store.insert(format!("{p}.tnet.out.b"), eye);
        }
        let mut din = f;
        for (i, &w) in self.spec.mlp_widths.iter().enumerate() {
            init_linear(store, seed, &format!("{p}.mlp{i}"), din, w, RELU_GAIN);
            init_norm(store, &format!("{p}.mlp{i}.bn"), w);
            din = w;
        }
        init_linear(store, seed, &format!("{p}.proj"), din, self.embed_dim, 1.0);
    }

    /// `[N * n, F] -> [N, q]`.
    pub fn forward(&self, g: &mut Graph, points: Var, n: usize) -> Var {
        let p = Self::PREFIX;
        let mut pts = points;
        if self.spec.spatial_transform {
            let mut h = pts;
            for i in 0..self.spec.tnet_widths.len() {
                h = linear_norm(g, &format!("{p}.tnet.l{i}"), h);
                h = g.relu(h);
            }
            let pooled = g.group_max(h, n);
            let t = linear(g, &format!("{p}.tnet.out"), pooled);
            pts = g.point_transform(pts, t, n);
        }
        let mut h = pts;
        for i in 0..self.spec.mlp_widths.len() {
            h = linear_norm(g, &format!("{p}.mlp{i}"), h);
            h = g.relu(h);
        }
        let pooled = g.group_max(h, n);
        let emb = linear(g, &format!("{p}.proj"), pooled);
        if self.normalize {
            g.normalize_rows(emb)
        } else {
            emb
        }
    }

    pub fn encode(&self, params: &ParamStore, pc: &PointCloudSample) -> Result<Embedding, ModelError> {
        if pc.is_empty() {
            return Err(ModelError::InputShape("cannot encode an empty cloud".into()));
        }
        if pc.dim != self.point_dim {
            return Err(ModelError::InputShape(format!(
                "cloud has {} features per point, encoder expects {}",
                pc.dim, self.point_dim
            )));
        }
        let mut g = Graph::inference(params);
        let x = g.input(Tensor::new(vec![pc.len(), pc.dim], pc.coords.clone()));
        let e = self.forward(&mut g, x, pc.len());
        Ok(Embedding(g.value(e).data().to_vec()))
    }
}

/// Affine map `q -> K`, one per modality.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub modality: Modality,
    pub embed_dim: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn prefix(modality: Modality) -> String {
        format!("head.{modality}")
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        init_linear(store, seed, &Self::prefix(self.modality), self.embed_dim, self.classes, 1.0);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        linear(g, &Self::prefix(self.modality), x)
    }

    /// `K` logits for one embedding.
    pub fn classify(&self, params: &ParamStore, x: &Embedding) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.embed_dim {
            return Err(ModelError::InputShape(format!(
                "embedding has length {}, head expects {}",
                x.len(),
                self.embed_dim
            )));
        }
        let mut g = Graph::new(params);
        let v = g.input(Tensor::new(vec![1, x.len()], x.0.clone()));
        let l = self.forward(&mut g, v);
        Ok(g.value(l).data().to_vec())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
