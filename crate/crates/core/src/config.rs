//! Experiment configuration, read from TOML.
//!
//! Every table is optional and falls back to its defaults; unknown keys are
//! rejected at every level. The resolved configuration (defaults filled in)
//! is what run manifests and checkpoints record.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentParams2D, AugmentParams3D};
use crate::domain::Dims;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synthgen::{DataConfig, Split};
use crate::trainer::{AblationConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// Write `curves/<class>.csv` next to `report.json`.
    pub write_curves: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::Test, write_curves: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub augment2d: AugmentParams2D,
    pub augment3d: AugmentParams3D,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub trainer: TrainConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            augment2d: AugmentParams2D::default(),
            augment3d: AugmentParams3D::default(),
            model: ModelConfig::default(),
            losses: LossConfig::default(),
            trainer: TrainConfig::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full-size shapes: 224x224 images, 4000-point clouds, q = 1024, the
    /// residual image encoder and unnormalized reconstruction norms.
    pub fn reference() -> Self {
        let mut c = Self::default();
        c.data.height = 224;
        c.data.width = 224;
        c.data.points_per_cloud = 4000;
        c.model = ModelConfig::reference();
        c.losses.normalize_recon = false;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn dims(&self) -> Dims {
        self.data.dims()
    }

    /// Range and consistency checks that do not need a corpus.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = ConfigError::Invalid;
        self.augment2d.validate().map_err(inv)?;
        self.augment3d.validate().map_err(inv)?;
        self.losses.validate().map_err(inv)?;
        self.trainer.validate().map_err(inv)?;
        self.data.split_counts().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate(&self.dims()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Errors when a corpus does not have the dimensions this config expects.
    pub fn check_corpus_dims(&self, dims: &Dims) -> Result<(), ConfigError> {
        let want = self.dims();
        let fields = [
            ("height", want.height, dims.height),
            ("width", want.width, dims.width),
            ("channels", want.channels, dims.channels),
            ("points_per_cloud", want.points, dims.points),
            ("attrs", want.attrs, dims.attrs),
            ("identities", want.classes, dims.classes),
        ];
        for (name, w, got) in fields {
            if w != got {
                return Err(ConfigError::Invalid(format!("config data.{name} = {w} but the corpus has {got}")));
            }
        }
        Ok(())
    }
}
