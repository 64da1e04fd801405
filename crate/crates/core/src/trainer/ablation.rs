//! Ablation variants: the unimodal baseline and four multimodal topologies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{fit, TrainError};
use crate::config::ExperimentConfig;
use crate::domain::Modality;
use crate::evalkit::{evaluate, EvalError};
use crate::synthgen::Corpus;

/// Topology switches. Attribute use lives in the model config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Train both encoders with the autoencoder path; false gives the
    /// unimodal baseline.
    pub multimodal: bool,
    /// Gate and apply the embedding-divergence term.
    pub use_aed: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { multimodal: true, use_aed: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Utut,
    Mtut,
    MtutAed,
    MtutAttr,
    MtutAedAttr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Utut, Variant::Mtut, Variant::MtutAed, Variant::MtutAttr, Variant::MtutAedAttr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Utut => "UTUT",
            Variant::Mtut => "MTUT",
            Variant::MtutAed => "MTUT+AED",
            Variant::MtutAttr => "MTUT+Attr",
            Variant::MtutAedAttr => "MTUT+AED+Attr",
        }
    }

    /// Sets the switches that define this variant; everything else is kept.
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let (multimodal, aed, attrs) = match self {
            Variant::Utut => (false, false, false),
            Variant::Mtut => (true, false, false),
            Variant::MtutAed => (true, true, false),
            Variant::MtutAttr => (true, false, true),
            Variant::MtutAedAttr => (true, true, true),
        };
        cfg.ablation.multimodal = multimodal;
        cfg.ablation.use_aed = aed;
        cfg.model.use_attributes = attrs;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '_', ' '], "+");
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == norm)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant `{s}` (expected one of {})", names.join(", "))
            })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One comparable result line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub modality: Modality,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub best_val_accuracy: f64,
    pub corpus_hash: String,
}

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Trains `variant` under `cfg` and evaluates the best-validation weights on
/// the configured evaluation split with the available modality.
pub fn run_ablation(corpus: &Corpus, variant: Variant, cfg: &ExperimentConfig) -> Result<AblationRow, AblationError> {
    let mut cfg = cfg.clone();
    variant.apply(&mut cfg);
    let out = fit(corpus, &cfg)?;
    let model = out.checkpoint.best_model();
    let modality = model.available();
    let report = evaluate(&model, corpus, cfg.eval.split, modality)?;
    Ok(AblationRow {
        variant,
        seed: cfg.seed,
        modality,
        accuracy: report.accuracy,
        macro_f1: report.macro_f1,
        macro_auc: report.macro_auc,
        best_val_accuracy: out.checkpoint.best.as_ref().map_or(f64::NAN, |b| b.val_accuracy),
        corpus_hash: corpus.content_hash(),
    })
}
