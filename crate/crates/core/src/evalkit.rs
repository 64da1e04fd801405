//! Unimodal evaluation: accuracy, confusion matrix, per-class precision,
//! recall and F1, macro-F1 and one-vs-rest ROC/AUC.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Modality, PairedSample};
use crate::encoders::softmax;
use crate::model::{Model, ModelError};
use crate::synthgen::{Corpus, Split};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("this model has no {0} encoder")]
    EncoderAbsent(Modality),
    #[error(
        "{0} is the missing modality of this model: its encoder and head exist only to train the \
         gate and autoencoder (aux_mode controls whether that head is trained at all), so it is not \
         evaluated; evaluate the available modality instead"
    )]
    MissingModality(Modality),
    #[error("model dims do not match the corpus: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest AUC; absent when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modality: Modality,
    pub split: Split,
    pub samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip)]
    pub curves: Vec<RocCurve>,
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    m
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> f64 {
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    hits as f64 / y_true.len().max(1) as f64
}

/// `(precision, recall, f1)` per class; zero where a denominator vanishes.
pub fn per_class_prf(confusion: &[Vec<usize>]) -> Vec<(f64, f64, f64)> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f)
        })
        .collect()
}

/// Mean F1 over the classes that occur in the labels or the predictions.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], k: usize) -> f64 {
    let cm = confusion_matrix(y_true, y_pred, k);
    let prf = per_class_prf(&cm);
    let present: Vec<usize> = (0..k)
        .filter(|&c| cm[c].iter().sum::<usize>() > 0 || (0..k).any(|r| cm[r][c] > 0))
        .collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().map(|&c| prf[c].2).sum::<f64>() / present.len() as f64
}

/// ROC curve of `scores` against binary `positive` labels. Samples with equal
/// scores enter the curve together, so ties contribute a diagonal segment.
/// `None` without both positives and negatives.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Option<Vec<(f64, f64)>> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Some(points)
}

/// Trapezoidal area under a curve given as `(x, y)` points in x order.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Per-class one-vs-rest AUCs; `None` for classes without positives or
/// negatives (a warning is logged for each).
pub fn roc_auc_per_class(scores: &[Vec<f64>], labels: &[usize], k: usize) -> (Vec<Option<f64>>, Vec<RocCurve>) {
    let mut aucs = Vec::with_capacity(k);
    let mut curves = Vec::new();
    for c in 0..k {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        match roc_curve(&s, &pos) {
            Some(points) => {
                aucs.push(Some(trapezoid(&points)));
                curves.push(RocCurve { class: c, points });
            }
            None => {
                log::warn!("class {c} has no positive (or no negative) samples; skipped in macro AUC");
                aucs.push(None);
            }
        }
    }
    (aucs, curves)
}

/// Mean one-vs-rest AUC over classes that have at least one positive.
pub fn roc_auc_macro(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    let k = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != k) || labels.iter().any(|&y| y >= k) {
        return Err(EvalError::Length("score rows must all have K entries and labels must be < K".into()));
    }
    let (aucs, _) = roc_auc_per_class(scores, labels, k);
    let valid: Vec<f64> = aucs.into_iter().flatten().collect();
    if valid.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

/// Builds a report from softmax scores and labels.
pub fn report_from_scores(
    modality: Modality,
    split: Split,
    scores: &[Vec<f64>],
    labels: &[usize],
    class_names: &[String],
) -> EvalReport {
    let k = class_names.len();
    let preds: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let confusion = confusion_matrix(labels, &preds, k);
    let prf = per_class_prf(&confusion);
    let (aucs, curves) = roc_auc_per_class(scores, labels, k);
    let valid: Vec<f64> = aucs.iter().flatten().copied().collect();
    let per_class = (0..k)
        .map(|c| ClassMetrics {
            class: c,
            name: class_names[c].clone(),
            support: confusion[c].iter().sum(),
            precision: prf[c].0,
            recall: prf[c].1,
            f1: prf[c].2,
            auc: aucs[c],
        })
        .collect();
    EvalReport {
        modality,
        split,
        samples: labels.len(),
        accuracy: accuracy(labels, &preds),
        macro_f1: macro_f1(labels, &preds, k),
        macro_auc: if valid.is_empty() { f64::NAN } else { valid.iter().sum::<f64>() / valid.len() as f64 },
        per_class,
        confusion,
        curves,
    }
}

/// Evaluates `model` on one split using only modality `m`'s encoder and head.
/// The other modality's sample data is never read.
pub fn evaluate(model: &Model, corpus: &Corpus, split: Split, m: Modality) -> Result<EvalReport, EvalError> {
    if model.multimodal && m == model.missing {
        return Err(EvalError::MissingModality(m));
    }
    if !model.has_encoder(m) {
        return Err(EvalError::EncoderAbsent(m));
    }
    if model.dims != corpus.dims {
        return Err(EvalError::DimMismatch(format!("model {:?}, corpus {:?}", model.dims, corpus.dims)));
    }
    let samples: Vec<&PairedSample> = corpus.samples_in(split);
    if samples.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let logits = model.predict_logits(m, &samples)?;
    let scores: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(report_from_scores(m, split, &scores, &labels, &corpus.identities))
}

/// Writes `report.json` and, when asked, `curves/<class name>.csv`.
pub fn write_report(report: &EvalReport, dir: &Path, curves: bool) -> Result<(), EvalError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&path, json).map_err(io(&path))?;
    if curves {
        let cdir = dir.join("curves");
        fs::create_dir_all(&cdir).map_err(io(&cdir))?;
        for curve in &report.curves {
            let name = &report.per_class[curve.class].name;
            let mut text = String::from("fpr,tpr\n");
            for (f, t) in &curve.points {
                text.push_str(&format!("{f},{t}\n"));
            }
            let path = cdir.join(format!("{name}.csv"));
            fs::write(&path, text).map_err(io(&path))?;
        }
    }
    Ok(())
}
