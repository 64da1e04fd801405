//! Optimization loop.
//!
//! One step encodes both modalities (or only the available one for a
//! unimodal model), classifies, gates the embedding-divergence term, fuses,
//! decodes the missing modality from both fused embeddings and takes one Adam
//! step on
//!
//! ```text
//! cls(available) + lambda1 * recon + lambda2 * aed + lambda_aux * cls(missing)
//! ```
//!
//! where the last term follows `aux_mode`. Terms whose weight or gate is zero
//! are left out of the graph entirely, so their absence is exact.
//!
//! Randomness comes from derived streams keyed by the run seed: shuffling by
//! epoch, augmentation by (epoch, sample, modality), decoder seeds by optimizer
//! step. A run's random state is therefore fully described by the seed and the
//! step/epoch counters stored in checkpoints.

mod ablation;
mod checkpoint;
mod schedule;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablation::{run_ablation, AblationConfig, AblationError, AblationRow, Variant};
pub use checkpoint::{load_checkpoint, save_checkpoint, BestRecord, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use schedule::{drops_so_far, lr_step};

use crate::augment::{augment_cloud, augment_image};
use crate::config::{ConfigError, ExperimentConfig};
use crate::decoders::normal_noise;
use crate::domain::{LossBundle, Modality, PairedSample};
use crate::graph::{Graph, Var};
use crate::losses::{self, aed_graph, recon_term, stronger_modality, AuxMode, ReconMetric};
use crate::model::{attr_batch, cloud_batch, image_batch, Model, ModelError};
use crate::norm::{self, NormStats};
use crate::optim::{Adam, AdamHyper};
use crate::rng;
use crate::synthgen::{Corpus, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Modality absent at test time.
    pub missing: Modality,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub lr_drop_factor: f64,
    /// Consecutive non-improving epochs before the rate drops.
    pub patience: usize,
    pub saturation_eps: f64,
    pub max_drops: usize,
    /// Augment the training split.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            missing: Modality::Image,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            lr_drop_factor: 10.0,
            patience: 3,
            saturation_eps: 1e-4,
            max_drops: 2,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("trainer.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("trainer.batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("trainer.lr must be positive, got {}", self.lr));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(format!("trainer.betas must lie in [0, 1), got {:?}", self.betas));
        }
        if self.lr_drop_factor < 1.0 {
            return Err("trainer.lr_drop_factor must be at least 1".into());
        }
        if self.patience == 0 {
            return Err("trainer.patience must be at least 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { beta1: self.betas[0], beta2: self.betas[1], eps: self.adam_eps }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {component} at epoch {epoch}, step {step}")]
    NonFinite { component: &'static str, epoch: usize, step: u64 },
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Tensors for one batch. Modalities the model does not read are `None` and
/// their sample data is never touched.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Option<Tensor>,
    pub clouds: Option<Tensor>,
    pub attrs: Tensor,
    pub labels: Vec<usize>,
    pub points: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn modality(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Image => self.images.as_ref(),
            Modality::Points => self.clouds.as_ref(),
        }
        .expect("batch built for this model")
    }
}

/// Per-sample augmentation settings for a training epoch.
#[derive(Clone, Copy)]
pub struct AugmentContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub epoch: usize,
}

fn augment_tag(m: Modality) -> u64 {
    match m {
        Modality::Image => 0,
        Modality::Points => 1,
    }
}

/// Assembles the batch for the corpus samples at `indices`, augmenting each
/// requested modality with its own derived stream when `augment` is given.
pub fn build_batch(
    corpus: &Corpus,
    indices: &[usize],
    modalities: &[Modality],
    augment: Option<AugmentContext<'_>>,
) -> Result<Batch, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let samples: Vec<&PairedSample> = indices.iter().map(|&i| &corpus.samples[i]).collect();
    let want = |m| modalities.contains(&m);
    let prepared: Vec<PairedSample> = match augment {
        Some(ctx) => indices
            .par_iter()
            .map(|&i| {
                let s = &corpus.samples[i];
                let stream = |m| rng::stream(ctx.cfg.seed, "augment", &[ctx.epoch as u64, i as u64, augment_tag(m)]);
                let image = if want(Modality::Image) {
                    augment_image(&s.image, &ctx.cfg.augment2d, &mut stream(Modality::Image))
                } else {
                    s.image.clone()
                };
                let cloud = if want(Modality::Points) {
                    augment_cloud(&s.cloud, &ctx.cfg.augment3d, &mut stream(Modality::Points))
                } else {
                    s.cloud.clone()
                };
                PairedSample { id: s.id.clone(), image, cloud, attrs: s.attrs.clone(), label: s.label }
            })
            .collect(),
        None => Vec::new(),
    };
    let refs: Vec<&PairedSample> = if augment.is_some() { prepared.iter().collect() } else { samples };
    Ok(Batch {
        indices: indices.to_vec(),
        images: if want(Modality::Image) { Some(image_batch(&refs)?) } else { None },
        clouds: if want(Modality::Points) { Some(cloud_batch(&refs, corpus.dims.points)?) } else { None },
        attrs: attr_batch(&refs),
        labels: refs.iter().map(|s| s.label).collect(),
        points: corpus.dims.points,
    })
}

/// Everything one objective evaluation produces.
#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    pub bundle: LossBundle,
    /// The value actually minimized (bundle total plus the auxiliary term).
    pub objective: f64,
    pub grads: BTreeMap<String, Tensor>,
    /// Correct available-modality predictions in the batch.
    pub correct: usize,
    pub delta_ema: Option<f64>,
    /// Batch statistics of the encoders' normalization layers.
    pub norm_stats: Vec<NormStats>,
}

fn decoder_noise(cfg: &ExperimentConfig, batch: &Batch, step: u64, which: u64, q: usize) -> Tensor {
    let n = batch.points;
    if cfg.model.freeze_seed {
        let mut data = Vec::with_capacity(batch.len() * n * q);
        for &i in &batch.indices {
            let mut r = rng::stream(cfg.seed, "decoder-seed-frozen", &[i as u64, which]);
            data.extend(normal_noise(&mut r, n, q).into_data());
        }
        Tensor::new(vec![batch.len() * n, q], data)
    } else {
        normal_noise(&mut rng::stream(cfg.seed, "decoder-seed", &[step, which]), batch.len() * n, q)
    }
}

fn reconstruct(g: &mut Graph, model: &Model, cfg: &ExperimentConfig, batch: &Batch, fused: Var, step: u64, which: u64) -> Var {
    match model.missing {
        Modality::Image => model.image_decoder().forward(g, fused),
        Modality::Points => {
            let noise = decoder_noise(cfg, batch, step, which, model.config.fused_dim());
            model.point_decoder().forward(g, fused, &noise, batch.points)
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Evaluates the training objective on one batch. `step` keys the decoder
/// seed stream; `delta_ema` is the smoothed loss delta carried between steps.
pub fn evaluate_objective(
    model: &Model,
    batch: &Batch,
    cfg: &ExperimentConfig,
    step: u64,
    delta_ema: Option<f64>,
    want_grads: bool,
) -> Result<ObjectiveOutput, TrainError> {
    let lc = &cfg.losses;
    let missing = model.missing;
    let avail = missing.other();
    let mut g = Graph::new(&model.params);

    let embed = |g: &mut Graph, m: Modality| -> Var {
        let x = g.input(batch.modality(m).clone());
        match m {
            Modality::Image => model.image_encoder().forward(g, x),
            Modality::Points => model.point_encoder().forward(g, x, batch.points),
        }
    };
    let x_avail = embed(&mut g, avail);
    let logits = model.head(avail).forward(&mut g, x_avail);
    let cls_avail = g.softmax_cross_entropy(logits, &batch.labels);
    let (_, k) = g.value(logits).dims2();
    let correct = g
        .value(logits)
        .data()
        .chunks(k)
        .zip(&batch.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();

    let mut bundle = LossBundle::default();
    let cls_avail_v = g.scalar(cls_avail);
    let mut objective = cls_avail;
    let mut new_ema = delta_ema;
    let mut aux_term = None;

    match avail {
        Modality::Image => bundle.cls_image = cls_avail_v,
        Modality::Points => bundle.cls_points = cls_avail_v,
    }

    if model.multimodal {
        let x_miss = embed(&mut g, missing);
        let head_in = if lc.aux_mode == AuxMode::HeadOnly { g.detach(x_miss) } else { x_miss };
        let logits_miss = model.head(missing).forward(&mut g, head_in);
        let cls_miss = g.softmax_cross_entropy(logits_miss, &batch.labels);
        let cls_miss_v = g.scalar(cls_miss);
        match missing {
            Modality::Image => bundle.cls_image = cls_miss_v,
            Modality::Points => bundle.cls_points = cls_miss_v,
        }
        if lc.aux_mode != AuxMode::None && lc.lambda_aux > 0.0 {
            aux_term = Some(cls_miss);
        }

        let (x_img, x_pts) = match avail {
            Modality::Image => (x_avail, x_miss),
            Modality::Points => (x_miss, x_avail),
        };

        if cfg.ablation.use_aed {
            let (raw, _) = losses::gate(lc, cls_avail_v, cls_miss_v).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let delta = if lc.rho_smoothing > 0.0 {
                let s = lc.rho_smoothing;
                let d = delta_ema.map_or(raw, |prev| s * prev + (1.0 - s) * raw);
                new_ema = Some(d);
                d
            } else {
                raw
            };
            let rho = losses::adaptive_rho(delta, lc.beta);
            bundle.delta = delta;
            bundle.rho = rho;
            if rho > 0.0 {
                let stronger = lc
                    .stop_gradient_on_stronger
                    .then(|| stronger_modality(bundle.cls_image, bundle.cls_points));
                if lc.lambda2 > 0.0 {
                    let aed = aed_graph(&mut g, x_img, x_pts, rho, stronger);
                    bundle.aed = g.scalar(aed);
                    let weighted = g.scale(aed, lc.lambda2);
                    objective = g.add(objective, weighted);
                } else {
                    let (xi, xp) = (g.value(x_img), g.value(x_pts));
                    let q = xi.shape()[1];
                    let rows = xi.data().chunks(q).zip(xp.data().chunks(q));
                    let sum: f64 = rows.map(|(a, b)| losses::aed_loss(a, b, rho).expect("equal widths")).sum();
                    bundle.aed = sum / batch.len() as f64;
                }
            }
        }

        let fusion = model.fusion();
        let attrs = g.input(batch.attrs.clone());
        let fused_img = fusion.forward(&mut g, Modality::Image, x_img, attrs);
        let fused_pts = fusion.forward(&mut g, Modality::Points, x_pts, attrs);
        let r_img = reconstruct(&mut g, model, cfg, batch, fused_img, step, 0);
        let r_pts = reconstruct(&mut g, model, cfg, batch, fused_pts, step, 1);
        let target = batch.modality(missing);
        let metric = if missing == Modality::Points { lc.recon_metric } else { ReconMetric::L2 };
        let t1 = recon_term(&mut g, r_img, target, metric, lc.normalize_recon, batch.points);
        let t2 = recon_term(&mut g, r_pts, target, metric, lc.normalize_recon, batch.points);
        let recon = g.add(t1, t2);
        bundle.recon = g.scalar(recon);
        if lc.lambda1 > 0.0 {
            let weighted = g.scale(recon, lc.lambda1);
            objective = g.add(objective, weighted);
        }
    }

    bundle.total = bundle.recomputed_total(lc.lambda1, lc.lambda2, missing);
    if let Some(aux) = aux_term {
        let weighted = g.scale(aux, lc.lambda_aux);
        objective = g.add(objective, weighted);
    }
    let objective_v = g.scalar(objective);
    if let Some(component) = bundle.first_non_finite() {
        return Err(TrainError::NonFinite { component, epoch: 0, step });
    }
    if !objective_v.is_finite() {
        return Err(TrainError::NonFinite { component: "objective", epoch: 0, step });
    }
    let grads = if want_grads { g.param_grads(&g.backward(objective)) } else { BTreeMap::new() };
    let norm_stats = norm::collect_stats(&g);
    Ok(ObjectiveOutput { bundle, objective: objective_v, grads, correct, delta_ema: new_ema, norm_stats })
}

/// Mutable training state: model, optimizer and the counters that key the
/// random streams.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub lr: f64,
    pub epoch: usize,
    pub global_step: u64,
    pub delta_ema: Option<f64>,
}

impl TrainState {
    pub fn new(model: Model, cfg: &ExperimentConfig) -> Self {
        Self { model, adam: Adam::new(cfg.trainer.adam()), lr: cfg.trainer.lr, epoch: 0, global_step: 0, delta_ema: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub bundle: LossBundle,
    pub correct: usize,
}

/// One optimizer step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &ExperimentConfig) -> Result<StepReport, TrainError> {
    let out = evaluate_objective(&state.model, batch, cfg, state.global_step, state.delta_ema, true).map_err(|e| match e {
        TrainError::NonFinite { component, step, .. } => TrainError::NonFinite { component, epoch: state.epoch + 1, step },
        other => other,
    })?;
    state.adam.step(&mut state.model.params, &out.grads, state.lr);
    norm::update_running(&mut state.model.params, &out.norm_stats);
    state.global_step += 1;
    state.delta_ema = out.delta_ema;
    Ok(StepReport { bundle: out.bundle, correct: out.correct })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the epoch's step bundles.
    pub train: LossBundle,
    /// Accuracy of the available head on the augmented training batches.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Validation accuracy and mean cross-entropy of the available modality.
pub fn validation_metrics(model: &Model, samples: &[&PairedSample]) -> Result<(f64, f64), TrainError> {
    let logits = model.predict_logits(model.available(), samples)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (row, s) in logits.iter().zip(samples) {
        correct += usize::from(argmax(row) == s.label);
        loss += losses::cls_loss(row, s.label).map_err(|e| ModelError::InputShape(e.to_string()))?;
    }
    let n = samples.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Modalities a model of this configuration reads.
pub fn model_modalities(cfg: &ExperimentConfig) -> Vec<Modality> {
    if cfg.ablation.multimodal {
        vec![Modality::Image, Modality::Points]
    } else {
        vec![cfg.trainer.missing.other()]
    }
}

/// Trains from scratch for `cfg.trainer.epochs` epochs.
pub fn fit(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<FitOutput, TrainError> {
    fit_with(corpus, cfg, None, |_| Ok(()))
}

/// Trains, optionally continuing from a checkpoint, and calls `on_epoch` with
/// a full checkpoint after every epoch.
pub fn fit_with(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<(), TrainError>,
) -> Result<FitOutput, TrainError> {
    cfg.validate()?;
    cfg.check_corpus_dims(&corpus.dims)?;
    for split in [Split::Train, Split::Val] {
        if corpus.count(split) == 0 {
            return Err(TrainError::EmptySplit(split));
        }
    }
    let corpus_hash = corpus.content_hash();
    let (mut state, mut history, mut best) = match resume {
        Some(ckpt) => {
            ckpt.check_resumable(cfg)?;
            ckpt.into_state()
        }
        None => {
            let model = Model::new(cfg.model.clone(), corpus.dims.clone(), cfg.trainer.missing, cfg.ablation.multimodal, cfg.seed)?;
            (TrainState::new(model, cfg), Vec::new(), None)
        }
    };
    let modalities = model_modalities(cfg);
    let train_idx = corpus.indices(Split::Train);
    let val = corpus.samples_in(Split::Val);

    while state.epoch < cfg.trainer.epochs {
        let epoch = state.epoch + 1;
        let mut order = train_idx.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(cfg.seed, "shuffle", &[epoch as u64]));
        let mut bundles = Vec::new();
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.trainer.batch_size) {
            let aug = cfg.trainer.augment.then_some(AugmentContext { cfg, epoch });
            let batch = build_batch(corpus, chunk, &modalities, aug)?;
            let report = train_step(&mut state, &batch, cfg)?;
            correct += report.correct;
            bundles.push((report.bundle, batch.len()));
        }
        let (val_accuracy, val_loss) = validation_metrics(&state.model, &val)?;
        history.push(EpochRecord {
            epoch,
            train: LossBundle::weighted_mean(&bundles),
            train_accuracy: correct as f64 / order.len() as f64,
            val_accuracy,
            val_loss,
            lr: state.lr,
        });
        if best.as_ref().is_none_or(|b: &BestRecord| val_accuracy > b.val_accuracy) {
            best = Some(BestRecord { epoch, val_accuracy, params: state.model.params.clone() });
        }
        let val_losses: Vec<f64> = history.iter().map(|r| r.val_loss).collect();
        state.lr = lr_step(&val_losses, state.lr, &cfg.trainer);
        state.epoch = epoch;
        let ckpt = Checkpoint::from_state(cfg, &state, &history, best.clone(), Some(corpus_hash.clone()));
        on_epoch(&ckpt)?;
    }
    let checkpoint = Checkpoint::from_state(cfg, &state, &history, best, Some(corpus_hash));
    Ok(FitOutput { checkpoint, history })
}

/// Long-format history: `epoch,split,metric,value`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,split,metric,value\n");
    for r in history {
        let t = &r.train;
        let rows = [
            ("train", "cls_image", t.cls_image),
            ("train", "cls_points", t.cls_points),
            ("train", "aed", t.aed),
            ("train", "recon", t.recon),
            ("train", "rho", t.rho),
            ("train", "delta", t.delta),
            ("train", "total", t.total),
            ("train", "accuracy", r.train_accuracy),
            ("train", "lr", r.lr),
            ("val", "accuracy", r.val_accuracy),
            ("val", "loss", r.val_loss),
        ];
        for (split, metric, v) in rows {
            out.push_str(&format!("{},{split},{metric},{v}\n", r.epoch));
        }
    }
    out
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<(), TrainError> {
    let io = |source| TrainError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(history_csv(history).as_bytes()).map_err(io)
}
