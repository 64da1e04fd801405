//! Checkpoint container.
//!
//! ```text
//! b"MTUTCKPT"            magic, 8 bytes
//! u32 LE                 format version
//! u64 LE                 header length in bytes
//! header                 UTF-8 JSON: config, counters, history, tensor directory
//! payload                little-endian f64 tensors, in directory order
//! ```
//!
//! Tensor groups are `param`, `adam.m`, `adam.v` and `best` (parameters of the
//! best-validation epoch). All maps are ordered, so saving a loaded
//! checkpoint reproduces the file byte for byte. The random state is the run
//! seed (in the config) plus `epoch` and `global_step`, which key every
//! derived stream.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{EpochRecord, TrainState};
use crate::config::ExperimentConfig;
use crate::domain::Dims;
use crate::model::Model;
use crate::optim::{Adam, AdamHyper};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MTUTCKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is incompatible with the config: `{path}` is {checkpoint} in the checkpoint but {config} in the config")]
    Incompatible { path: String, checkpoint: String, config: String },
    #[error("this checkpoint holds best-epoch weights only and cannot be resumed")]
    NotResumable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub params: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub dims: Dims,
    pub epoch: usize,
    pub global_step: u64,
    pub lr: f64,
    pub delta_ema: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestRecord>,
    pub corpus_hash: Option<String>,
    /// False for best-epoch snapshots, which lack matching optimizer state.
    pub resumable: bool,
    pub params: ParamStore,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BestHeader {
    epoch: usize,
    val_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ExperimentConfig,
    dims: Dims,
    epoch: usize,
    global_step: u64,
    lr: f64,
    delta_ema: Option<f64>,
    history: Vec<EpochRecord>,
    best: Option<BestHeader>,
    corpus_hash: Option<String>,
    resumable: bool,
    adam_hyper: AdamHyper,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_state(
        cfg: &ExperimentConfig,
        state: &TrainState,
        history: &[EpochRecord],
        best: Option<BestRecord>,
        corpus_hash: Option<String>,
    ) -> Self {
        Self {
            config: cfg.clone(),
            dims: state.model.dims.clone(),
            epoch: state.epoch,
            global_step: state.global_step,
            lr: state.lr,
            delta_ema: state.delta_ema,
            history: history.to_vec(),
            best,
            corpus_hash,
            resumable: true,
            params: state.model.params.clone(),
            adam: state.adam.clone(),
        }
    }

    fn model_with(&self, params: ParamStore) -> Model {
        Model {
            config: self.config.model.clone(),
            dims: self.dims.clone(),
            missing: self.config.trainer.missing,
            multimodal: self.config.ablation.multimodal,
            params,
        }
    }

    /// Model with the latest parameters.
    pub fn model(&self) -> Model {
        self.model_with(self.params.clone())
    }

    /// Model with the best-validation parameters (latest if none recorded).
    pub fn best_model(&self) -> Model {
        self.model_with(self.best.as_ref().map_or_else(|| self.params.clone(), |b| b.params.clone()))
    }

    /// Evaluation-only checkpoint of the best-validation epoch.
    pub fn best_snapshot(&self) -> Checkpoint {
        let Some(best) = &self.best else { return self.clone() };
        Checkpoint {
            epoch: best.epoch,
            history: self.history[..best.epoch.min(self.history.len())].to_vec(),
            params: best.params.clone(),
            resumable: false,
            adam: Adam::new(self.adam.hyper),
            ..self.clone()
        }
    }

    /// Fails unless `cfg` describes the same run (the epoch budget and paths
    /// may differ).
    pub fn check_compatible(&self, cfg: &ExperimentConfig) -> Result<(), CheckpointError> {
        let strip = |c: &ExperimentConfig| {
            let mut c = c.clone();
            c.trainer.epochs = 0;
            c.paths = Default::default();
            c.eval = Default::default();
            serde_json::to_value(c).expect("config serializes")
        };
        match first_difference(&strip(&self.config), &strip(cfg), String::new()) {
            None => Ok(()),
            Some((path, a, b)) => Err(CheckpointError::Incompatible { path, checkpoint: a, config: b }),
        }
    }

    pub fn check_resumable(&self, cfg: &ExperimentConfig) -> Result<(), CheckpointError> {
        if !self.resumable {
            return Err(CheckpointError::NotResumable);
        }
        self.check_compatible(cfg)
    }

    pub(super) fn into_state(self) -> (TrainState, Vec<EpochRecord>, Option<BestRecord>) {
        let model = self.model();
        let state = TrainState {
            model,
            adam: self.adam,
            lr: self.lr,
            epoch: self.epoch,
            global_step: self.global_step,
            delta_ema: self.delta_ema,
        };
        (state, self.history, self.best)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut groups: Vec<(&str, &BTreeMap<String, Tensor>)> = Vec::new();
        let params = self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<BTreeMap<_, _>>();
        let best = self
            .best
            .as_ref()
            .map(|b| b.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<BTreeMap<_, _>>());
        groups.push(("param", &params));
        groups.push(("adam.m", &self.adam.m));
        groups.push(("adam.v", &self.adam.v));
        if let Some(b) = &best {
            groups.push(("best", b));
        }
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (group, map) in groups {
            for (name, t) in map {
                tensors.push(TensorEntry { group: group.to_string(), name: name.clone(), shape: t.shape().to_vec() });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            dims: self.dims.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            lr: self.lr,
            delta_ema: self.delta_ema,
            history: self.history.clone(),
            best: self.best.as_ref().map(|b| BestHeader { epoch: b.epoch, val_accuracy: b.val_accuracy }),
            corpus_hash: self.corpus_hash.clone(),
            resumable: self.resumable,
            adam_hyper: self.adam.hyper,
            adam_t: self.adam.t,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 20 {
            return Err(corrupt("truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut payload = &body[hlen..];
        let mut groups: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
        for entry in &header.tensors {
            let numel: usize = entry.shape.iter().product();
            if payload.len() < numel * 8 {
                return Err(corrupt(&format!("payload ends inside tensor `{}/{}`", entry.group, entry.name)));
            }
            let data = payload[..numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[numel * 8..];
            groups
                .entry(entry.group.clone())
                .or_default()
                .insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
        }
        if !payload.is_empty() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        let to_store = |m: BTreeMap<String, Tensor>| {
            let mut s = ParamStore::new();
            m.into_iter().for_each(|(k, v)| s.insert(k, v));
            s
        };
        let params = to_store(groups.remove("param").unwrap_or_default());
        let best = match (header.best, groups.remove("best")) {
            (Some(b), Some(p)) => Some(BestRecord { epoch: b.epoch, val_accuracy: b.val_accuracy, params: to_store(p) }),
            (None, None) => None,
            _ => return Err(corrupt("best-epoch record and tensors disagree")),
        };
        let adam = Adam {
            hyper: header.adam_hyper,
            t: header.adam_t,
            m: groups.remove("adam.m").unwrap_or_default(),
            v: groups.remove("adam.v").unwrap_or_default(),
        };
        if let Some(g) = groups.keys().next() {
            return Err(corrupt(&format!("unknown tensor group `{g}`")));
        }
        let ckpt = Checkpoint {
            config: header.config,
            dims: header.dims,
            epoch: header.epoch,
            global_step: header.global_step,
            lr: header.lr,
            delta_ema: header.delta_ema,
            history: header.history,
            best,
            corpus_hash: header.corpus_hash,
            resumable: header.resumable,
            params,
            adam,
        };
        ckpt.check_architecture()?;
        Ok(ckpt)
    }

    /// The stored parameters must be exactly those the config snapshot builds.
    fn check_architecture(&self) -> Result<(), CheckpointError> {
        let fresh = Model::new(
            self.config.model.clone(),
            self.dims.clone(),
            self.config.trainer.missing,
            self.config.ablation.multimodal,
            0,
        )
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let stores = std::iter::once(&self.params).chain(self.best.as_ref().map(|b| &b.params));
        for store in stores {
            if store.len() != fresh.params.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "{} parameter tensors stored, the config builds {}",
                    store.len(),
                    fresh.params.len()
                )));
            }
            for (name, t) in fresh.params.iter() {
                match store.get(name) {
                    Some(s) if s.shape() == t.shape() => {}
                    _ => return Err(CheckpointError::Corrupt(format!("parameter `{name}` missing or misshapen"))),
                }
            }
        }
        Ok(())
    }
}

fn first_difference(a: &Value, b: &Value, path: String) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            keys.into_iter().find_map(|k| {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                first_difference(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), p)
            })
        }
        _ if a == b => None,
        _ => Some((path, a.to_string(), b.to_string())),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Checkpoint::from_bytes(&bytes)
}
