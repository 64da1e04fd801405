//! Training objectives.
//!
//! Scalar reference versions of every loss live next to graph builders that
//! the trainer differentiates. The gate `rho` is always a plain number: it is
//! computed from the current classification losses and enters the graph as a
//! constant factor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{LossBundle, Modality};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
}

/// Which difference of classification losses opens the gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaConvention {
    /// `cls(available) - cls(missing)`: align when the training-only modality
    /// classifies better.
    #[default]
    WorkedExample,
    /// `cls(missing) - cls(available)`.
    Formal,
}

/// How the missing modality's classification loss reaches the optimizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxMode {
    /// Updates the missing-modality head and encoder.
    #[default]
    Full,
    /// Updates the head only; the embedding is detached first.
    HeadOnly,
    /// Not optimized at all.
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMetric {
    /// Euclidean norm of the flattened difference (point order matters).
    #[default]
    L2,
    /// Symmetric chamfer distance; point clouds only.
    Chamfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_aux: f64,
    pub aux_mode: AuxMode,
    pub delta_convention: DeltaConvention,
    pub stop_gradient_on_stronger: bool,
    pub recon_metric: ReconMetric,
    /// Divide each reconstruction norm by sqrt(element count).
    pub normalize_recon: bool,
    /// EMA factor applied to the loss delta before gating; 0 disables it.
    pub rho_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda1: 0.001,
            lambda2: 0.1,
            lambda_aux: 1.0,
            aux_mode: AuxMode::Full,
            delta_convention: DeltaConvention::WorkedExample,
            stop_gradient_on_stronger: true,
            recon_metric: ReconMetric::L2,
            normalize_recon: true,
            rho_smoothing: 0.0,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights { lambda1: self.lambda1, lambda2: self.lambda2 }
    }

    pub fn gating(&self, missing: Modality) -> GatingConfig {
        GatingConfig { beta: self.beta, missing, stop_gradient_on_stronger: self.stop_gradient_on_stronger }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(format!("losses.beta must be positive, got {}", self.beta));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda_aux", self.lambda_aux)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("losses.{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.rho_smoothing) {
            return Err(format!("losses.rho_smoothing must lie in [0, 1), got {}", self.rho_smoothing));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatingConfig {
    pub beta: f64,
    pub missing: Modality,
    pub stop_gradient_on_stronger: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { lambda1: 0.001, lambda2: 0.1 }
    }
}

/// `-log softmax(logits)[label]`.
pub fn cls_loss(logits: &[f64], label: usize) -> Result<f64, LossError> {
    if label >= logits.len() {
        return Err(LossError::LabelOutOfRange { label, classes: logits.len() });
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    Ok(lse - logits[label])
}

/// Mean of [`cls_loss`] over rows.
pub fn cls_loss_batch(rows: &[Vec<f64>], labels: &[usize]) -> Result<f64, LossError> {
    if rows.len() != labels.len() {
        return Err(LossError::LengthMismatch(rows.len(), labels.len()));
    }
    let mut sum = 0.0;
    for (r, &l) in rows.iter().zip(labels) {
        sum += cls_loss(r, l)?;
    }
    Ok(sum / rows.len().max(1) as f64)
}

/// `cls_avail - cls_missing`.
pub fn loss_delta(cls_avail: f64, cls_missing: f64) -> f64 {
    cls_avail - cls_missing
}

pub fn loss_delta_with(convention: DeltaConvention, cls_avail: f64, cls_missing: f64) -> f64 {
    match convention {
        DeltaConvention::WorkedExample => cls_avail - cls_missing,
        DeltaConvention::Formal => cls_missing - cls_avail,
    }
}

/// `e^(beta * delta) - 1` for positive `delta`, else 0.
pub fn adaptive_rho(delta: f64, beta: f64) -> f64 {
    if delta > 0.0 {
        (beta * delta).exp() - 1.0
    } else {
        0.0
    }
}

fn check_beta(beta: f64) -> Result<(), LossError> {
    if beta > 0.0 {
        Ok(())
    } else {
        Err(LossError::BadBeta(beta))
    }
}

/// Gate value and delta for one step under `cfg`.
pub fn gate(cfg: &LossConfig, cls_avail: f64, cls_missing: f64) -> Result<(f64, f64), LossError> {
    check_beta(cfg.beta)?;
    let delta = loss_delta_with(cfg.delta_convention, cls_avail, cls_missing);
    Ok((delta, adaptive_rho(delta, cfg.beta)))
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `rho * ||x_img - x_pts||`. The stop-gradient contract only matters for the
/// graph version, [`aed_graph`].
pub fn aed_loss(x_img: &[f64], x_pts: &[f64], rho: f64) -> Result<f64, LossError> {
    if x_img.len() != x_pts.len() {
        return Err(LossError::LengthMismatch(x_img.len(), x_pts.len()));
    }
    Ok(rho * l2(x_img, x_pts))
}

/// `||from_img - target|| + ||from_pts - target||` over flattened samples.
pub fn recon_loss(target: &[f64], from_img: &[f64], from_pts: &[f64]) -> Result<f64, LossError> {
    if from_img.len() != target.len() {
        return Err(LossError::LengthMismatch(from_img.len(), target.len()));
    }
    if from_pts.len() != target.len() {
        return Err(LossError::LengthMismatch(from_pts.len(), target.len()));
    }
    Ok(l2(from_img, target) + l2(from_pts, target))
}

/// `cls(available) + lambda1 * recon + lambda2 * aed`.
pub fn total_objective(b: &LossBundle, w: ObjectiveWeights, missing: Modality) -> f64 {
    b.recomputed_total(w.lambda1, w.lambda2, missing)
}

/// The modality whose embedding is held fixed by the AED term: the one with
/// the lower classification loss.
pub fn stronger_modality(cls_image: f64, cls_points: f64) -> Modality {
    if cls_image <= cls_points {
        Modality::Image
    } else {
        Modality::Points
    }
}

/// Batch-mean `rho * ||x_img - x_pts||` with the `stronger` side detached.
pub fn aed_graph(g: &mut Graph, x_img: Var, x_pts: Var, rho: f64, stronger: Option<Modality>) -> Var {
    let (a, b) = match stronger {
        Some(Modality::Image) => (g.detach(x_img), x_pts),
        Some(Modality::Points) => (x_img, g.detach(x_pts)),
        None => (x_img, x_pts),
    };
    let diff = g.sub(a, b);
    let norms = g.row_norm(diff);
    let m = g.mean(norms);
    g.scale(m, rho)
}

/// Batch-mean reconstruction distance of one reconstruction to `target`.
///
/// `recon` and `target` hold `N` samples; for points they are `[N * n, F]`.
/// The L2 variant optionally divides by sqrt(per-sample element count).
pub fn recon_term(g: &mut Graph, recon: Var, target: &Tensor, metric: ReconMetric, normalize: bool, points: usize) -> Var {
    match metric {
        ReconMetric::L2 => {
            let shape = g.value(recon).shape().to_vec();
            assert_eq!(shape, target.shape(), "reconstruction shape");
            let batch = if shape.len() == 4 { shape[0] } else { shape[0] / points };
            let per = target.numel() / batch;
            let t = g.input(target.clone());
            let d = g.sub(recon, t);
            let flat = g.reshape(d, &[batch, per]);
            let norms = g.row_norm(flat);
            let m = g.mean(norms);
            if normalize {
                g.scale(m, 1.0 / (per as f64).sqrt())
            } else {
                m
            }
        }
        ReconMetric::Chamfer => {
            let c = g.chamfer(recon, target, points);
            g.mean(c)
        }
    }
}
