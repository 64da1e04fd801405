//! Multimodal training, unimodal testing for face classification.
//!
//! Paired 2D images and 3D point clouds train two encoders jointly. A
//! cross-modal and an intra-modal autoencoder reconstruct the modality that
//! will be missing at test time from attribute-fused embeddings, and a gated
//! embedding-divergence term pulls the weaker modality's embedding toward the
//! stronger one. At test time only the available modality's encoder and head
//! run.
//!
//! Everything is computed in `f64` on a small reverse-mode tape ([`graph`]).

pub mod augment;
pub mod config;
pub mod decoders;
pub mod domain;
pub mod encoders;
pub mod evalkit;
pub mod fusion;
pub mod graph;
pub mod losses;
pub mod model;
pub mod norm;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use config::{ConfigError, ExperimentConfig};
pub use domain::{
    validate_paired_sample, AttributeVector, Dims, Embedding, ImageSample, LossBundle, Modality, PairedSample,
    PointCloudSample, ValidationError,
};
pub use evalkit::{evaluate, EvalError, EvalReport};
pub use model::{Model, ModelConfig, ModelError};
pub use params::ParamStore;
pub use synthgen::{export_corpus, generate_corpus, load_corpus, Corpus, CorpusError, DataConfig, Split};
pub use tensor::Tensor;
pub use trainer::{
    fit, fit_with, load_checkpoint, run_ablation, save_checkpoint, train_step, AblationError, Checkpoint, CheckpointError,
    TrainConfig, TrainError, Variant,
};

/// Any failure of the library, grouped by what went wrong.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Ablation(#[from] AblationError),
}

/// Coarse failure class, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or arguments.
    Usage,
    /// Unreadable or inconsistent data, corpora or checkpoints.
    Data,
    /// A loss or gradient became NaN or infinite.
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Corpus(CorpusError::InvalidConfig(_)) => ErrorKind::Usage,
            Error::Corpus(_) | Error::Checkpoint(_) => ErrorKind::Data,
            Error::Train(e) | Error::Ablation(AblationError::Train(e)) => train_kind(e),
            Error::Eval(_) | Error::Ablation(AblationError::Eval(_)) => ErrorKind::Data,
        }
    }
}

fn train_kind(e: &TrainError) -> ErrorKind {
    match e {
        TrainError::NonFinite { .. } => ErrorKind::Numeric,
        TrainError::Config(_) => ErrorKind::Usage,
        TrainError::Model(ModelError::Config(_)) => ErrorKind::Usage,
        TrainError::Checkpoint(CheckpointError::Incompatible { .. }) => ErrorKind::Usage,
        _ => ErrorKind::Data,
    }
}
