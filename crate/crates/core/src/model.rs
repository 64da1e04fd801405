//! Model assembly: which modules exist for a given topology, their parameters,
//! and batched inference.
//!
//! A unimodal model holds the available modality's encoder and head. A
//! multimodal model holds both encoders and heads, the fusion maps and the
//! decoder of the missing modality. Parameters are initialized by name, so a
//! module present in two topologies starts from the same values in both.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoders::{ImageDecoder, ImageDecoderSpec, PointDecoder, PointDecoderSpec};
use crate::domain::{Dims, Embedding, Modality, PairedSample};
use crate::encoders::{ClassifierHead, ImageEncoder, ImageEncoderSpec, PointEncoder, PointEncoderSpec};
use crate::fusion::{Activation, Fusion};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("input shape: {0}")]
    InputShape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("this model has no {0} encoder")]
    EncoderAbsent(Modality),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub normalize_embeddings: bool,
    pub encoder2d: ImageEncoderSpec,
    pub encoder3d: PointEncoderSpec,
    pub use_attributes: bool,
    pub share_fusion: bool,
    /// Width of the fused embedding; defaults to `embed_dim`.
    pub fusion_out_dim: Option<usize>,
    pub decoder2d: ImageDecoderSpec,
    pub decoder3d: PointDecoderSpec,
    /// Reuse one fixed Gaussian seed per sample instead of fresh draws.
    pub freeze_seed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            normalize_embeddings: false,
            encoder2d: ImageEncoderSpec::default(),
            encoder3d: PointEncoderSpec::default(),
            use_attributes: true,
            share_fusion: false,
            fusion_out_dim: None,
            decoder2d: ImageDecoderSpec::default(),
            decoder3d: PointDecoderSpec::default(),
            freeze_seed: false,
        }
    }
}

impl ModelConfig {
    /// ResNet-18-like image encoder, 64-128-1024 PointNet, q = 1024 and the
    /// 224x224 decoder chain.
    pub fn reference() -> Self {
        Self {
            embed_dim: 1024,
            encoder2d: ImageEncoderSpec::resnet18_like(),
            encoder3d: PointEncoderSpec::reference(),
            decoder2d: ImageDecoderSpec::reference(),
            decoder3d: PointDecoderSpec::reference(),
            normalize_embeddings: false,
            use_attributes: true,
            share_fusion: false,
            fusion_out_dim: None,
            freeze_seed: false,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.fusion_out_dim.unwrap_or(self.embed_dim)
    }

    /// Checks internal consistency and agreement with the data dimensions.
    pub fn validate(&self, dims: &Dims) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.embed_dim == 0 || self.fused_dim() == 0 {
            return bad("embed_dim and fusion_out_dim must be positive".into());
        }
        self.encoder2d.validate().map_err(ModelError::Config)?;
        self.encoder3d.validate().map_err(ModelError::Config)?;
        self.decoder2d.validate().map_err(ModelError::Config)?;
        if self.decoder3d.hidden.contains(&0) {
            return bad("decoder3d widths must be positive".into());
        }
        let side = *self.decoder2d.output_sizes().last().expect("validated non-empty");
        if side != dims.height || side != dims.width {
            return bad(format!(
                "decoder2d produces {side}x{side} images but the data is {}x{}",
                dims.height, dims.width
            ));
        }
        let out_c = *self.decoder2d.channels.last().expect("validated non-empty");
        if out_c != dims.channels {
            return bad(format!("decoder2d produces {out_c} channels but the data has {}", dims.channels));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: Dims,
    pub missing: Modality,
    pub multimodal: bool,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, dims: Dims, missing: Modality, multimodal: bool, seed: u64) -> Result<Self, ModelError> {
        config.validate(&dims)?;
        let mut m = Model { config, dims, missing, multimodal, params: ParamStore::new() };
        let mut store = ParamStore::new();
        for modality in m.encoded_modalities() {
            match modality {
                Modality::Image => m.image_encoder().init_params(&mut store, seed),
                Modality::Points => m.point_encoder().init_params(&mut store, seed),
            }
            m.head(modality).init_params(&mut store, seed);
        }
        if multimodal {
            m.fusion().init_params(&mut store, seed);
            match missing {
                Modality::Image => m.image_decoder().init_params(&mut store, seed),
                Modality::Points => m.point_decoder().init_params(&mut store, seed),
            }
        }
        m.params = store;
        Ok(m)
    }

    pub fn available(&self) -> Modality {
        self.missing.other()
    }

    pub fn encoded_modalities(&self) -> Vec<Modality> {
        if self.multimodal {
            vec![Modality::Image, Modality::Points]
        } else {
            vec![self.available()]
        }
    }

    pub fn has_encoder(&self, m: Modality) -> bool {
        let prefix = match m {
            Modality::Image => ImageEncoder::PREFIX,
            Modality::Points => PointEncoder::PREFIX,
        };
        self.params.has_prefix(&format!("{prefix}.")) && self.params.has_prefix(&format!("{}.", ClassifierHead::prefix(m)))
    }

    pub fn image_encoder(&self) -> ImageEncoder {
        ImageEncoder {
            spec: self.config.encoder2d.clone(),
            in_channels: self.dims.channels,
            embed_dim: self.config.embed_dim,
            normalize: self.config.normalize_embeddings,
        }
    }

    pub fn point_encoder(&self) -> PointEncoder {
        PointEncoder {
            spec: self.config.encoder3d.clone(),
            point_dim: self.dims.point_dim,
            embed_dim: self.config.embed_dim,
            normalize: self.config.normalize_embeddings,
        }
    }

    pub fn head(&self, m: Modality) -> ClassifierHead {
        ClassifierHead { modality: m, embed_dim: self.config.embed_dim, classes: self.dims.classes }
    }

    pub fn fusion(&self) -> Fusion {
        Fusion {
            embed_dim: self.config.embed_dim,
            attrs: self.dims.attrs,
            out_dim: self.config.fused_dim(),
            use_attributes: self.config.use_attributes,
            shared: self.config.share_fusion,
            activation: Activation::Relu,
        }
    }

    pub fn image_decoder(&self) -> ImageDecoder {
        ImageDecoder { spec: self.config.decoder2d.clone(), in_dim: self.config.fused_dim() }
    }

    pub fn point_decoder(&self) -> PointDecoder {
        PointDecoder { spec: self.config.decoder3d.clone(), in_dim: self.config.fused_dim(), point_dim: self.dims.point_dim }
    }

    /// Embeddings of one modality for a list of samples; the other modality's
    /// data is never touched.
    pub fn embed(&self, m: Modality, samples: &[&PairedSample]) -> Result<Vec<Embedding>, ModelError> {
        if !self.has_encoder(m) {
            return Err(ModelError::EncoderAbsent(m));
        }
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::inference(&self.params);
            let e = match m {
                Modality::Image => {
                    let x = g.input(image_batch(chunk)?);
                    self.image_encoder().forward(&mut g, x)
                }
                Modality::Points => {
                    let x = g.input(cloud_batch(chunk, self.dims.points)?);
                    self.point_encoder().forward(&mut g, x, self.dims.points)
                }
            };
            let (_, q) = g.value(e).dims2();
            out.extend(g.value(e).data().chunks(q).map(|r| Embedding(r.to_vec())));
        }
        Ok(out)
    }

    /// Classifier logits of modality `m` for each sample.
    pub fn predict_logits(&self, m: Modality, samples: &[&PairedSample]) -> Result<Vec<Vec<f64>>, ModelError> {
        let head = self.head(m);
        self.embed(m, samples)?
            .iter()
            .map(|e| head.classify(&self.params, e))
            .collect()
    }
}

const INFERENCE_CHUNK: usize = 64;

/// `[N, C, H, W]` tensor of the samples' images.
pub fn image_batch(samples: &[&PairedSample]) -> Result<Tensor, ModelError> {
    let first = &samples.first().ok_or_else(|| ModelError::InputShape("empty batch".into()))?.image;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if (s.image.channels, s.image.height, s.image.width) != (c, h, w) {
            return Err(ModelError::InputShape(format!("sample `{}` has a different image size", s.id)));
        }
        data.extend_from_slice(&s.image.pixels);
    }
    Ok(Tensor::new(vec![samples.len(), c, h, w], data))
}

/// `[N * n, F]` tensor of the samples' clouds.
pub fn cloud_batch(samples: &[&PairedSample], n: usize) -> Result<Tensor, ModelError> {
    let f = samples.first().ok_or_else(|| ModelError::InputShape("empty batch".into()))?.cloud.dim;
    let mut data = Vec::with_capacity(samples.len() * n * f);
    for s in samples {
        if s.cloud.len() != n || s.cloud.dim != f {
            return Err(ModelError::InputShape(format!(
                "sample `{}` has {} points of dim {}, expected {n} of dim {f}",
                s.id,
                s.cloud.len(),
                s.cloud.dim
            )));
        }
        data.extend_from_slice(&s.cloud.coords);
    }
    Ok(Tensor::new(vec![samples.len() * n, f], data))
}

/// `[N, a]` tensor of the samples' attribute vectors.
pub fn attr_batch(samples: &[&PairedSample]) -> Tensor {
    let a = samples.first().map_or(0, |s| s.attrs.0.len());
    Tensor::new(vec![samples.len(), a], samples.iter().flat_map(|s| s.attrs.0.iter().copied()).collect())
}
