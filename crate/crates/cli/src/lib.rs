//! Command implementations behind the `mtut` binary.
//!
//! Each command resolves one [`ExperimentConfig`] (file, then flags), writes
//! its outputs into a run directory together with a `run_manifest.json` that
//! echoes the resolved config, and returns a summary for printing.
//!
//! Precedence: built-in defaults < `--config` file < command-line flags.
//! `paths.corpus` / `paths.out` in the file are used when the matching flag
//! is absent.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use mtut_core::evalkit::write_report;
use mtut_core::trainer::write_history_csv;
use mtut_core::{
    evaluate, export_corpus, fit_with, generate_corpus, load_checkpoint, load_corpus, run_ablation, save_checkpoint,
    Checkpoint, Corpus, ErrorKind, EvalReport, ExperimentConfig, Modality, Split, Variant,
};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// A bad flag combination or a refused overwrite; exits with the usage code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Routes a library error through [`mtut_core::Error`] so its kind survives
/// inside the anyhow chain.
fn core<T, E: Into<mtut_core::Error>>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| anyhow::Error::new(e.into()))
}

/// Process exit code: 1 usage or config, 2 data, 3 numeric failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<mtut_core::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            };
        }
    }
    2
}

/// Flags that override config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub missing: Option<Modality>,
    pub ablation: Option<Variant>,
}

/// Defaults, then the file at `path`, then `ov`; validated.
pub fn resolve_config(path: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => core(ExperimentConfig::load(p))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(m) = ov.missing {
        cfg.trainer.missing = m;
    }
    if let Some(v) = ov.ablation {
        v.apply(&mut cfg);
    }
    core(cfg.validate())?;
    Ok(cfg)
}

/// `flag` if given, else the config's path, else a usage error.
pub fn pick_path(flag: Option<&Path>, from_config: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| from_config.cloned())
        .ok_or_else(|| usage(format!("no {what} directory: pass --{what} or set paths.{what} in the config")))
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(usage(format!("{} exists and is not a directory", dir.display())));
    }
    if is_nonempty_dir(dir) && !force {
        return Err(usage(format!("{} is not empty (pass --force to write into it anyway)", dir.display())));
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    /// Resolved configuration; running the same command with this as
    /// `--config` reproduces the run.
    config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    corpus_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    corpus_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    resumed_from: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<&'a [u64]>,
}

impl<'a> RunManifest<'a> {
    fn new(command: &'a str, config: &'a ExperimentConfig) -> Self {
        Self {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config,
            corpus_dir: None,
            corpus_hash: None,
            resumed_from: None,
            checkpoint: None,
            seeds: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).context("serializing run manifest")?;
        fs::write(&path, json).with_context(|| format!("cannot write {}", path.display()))?;
        let toml_path = dir.join("config.toml");
        fs::write(&toml_path, self.config.to_toml_string()).with_context(|| format!("cannot write {}", toml_path.display()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub identities: usize,
    pub samples: usize,
    pub split_counts: [usize; 3],
    pub corpus_hash: String,
}

impl std::fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [tr, va, te] = self.split_counts;
        write!(
            f,
            "{} identities, {} samples (train {tr}, val {va}, test {te}), corpus hash {}",
            self.identities, self.samples, self.corpus_hash
        )
    }
}

/// Generates the synthetic corpus described by `cfg` into `out`.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<SynthSummary> {
    prepare_out_dir(out, force)?;
    let corpus = core(generate_corpus(cfg.seed, &cfg.data))?;
    core(export_corpus(&corpus, out))?;
    Ok(SynthSummary {
        identities: corpus.identities.len(),
        samples: corpus.samples.len(),
        split_counts: Split::ALL.map(|s| corpus.count(s)),
        corpus_hash: corpus.content_hash(),
    })
}

fn load_checked_corpus(dir: &Path, cfg: &ExperimentConfig) -> Result<Corpus> {
    let corpus = core(load_corpus(dir)).with_context(|| format!("loading corpus {}", dir.display()))?;
    core(cfg.check_corpus_dims(&corpus.dims))?;
    Ok(corpus)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_val_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
}

/// Trains into `out`: `last.ckpt` (rewritten after every epoch), `best.ckpt`,
/// `history.csv` and the run manifest. With `resume`, training continues
/// from that checkpoint and `out` may already hold files.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    corpus_dir: &Path,
    out: &Path,
    force: bool,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    let start = match resume {
        Some(p) => {
            let ckpt = core(load_checkpoint(p)).with_context(|| format!("loading checkpoint {}", p.display()))?;
            core(ckpt.check_resumable(cfg).map_err(mtut_core::TrainError::from))?;
            Some(ckpt)
        }
        None => None,
    };
    let corpus = load_checked_corpus(corpus_dir, cfg)?;
    prepare_out_dir(out, force || resume.is_some())?;

    let mut manifest = RunManifest::new("train", cfg);
    manifest.corpus_dir = Some(corpus_dir.display().to_string());
    manifest.corpus_hash = Some(corpus.content_hash());
    manifest.resumed_from = resume.map(|p| p.display().to_string());
    manifest.write(out)?;

    let last = out.join(LAST_CHECKPOINT);
    let result = fit_with(&corpus, cfg, start, |ckpt: &Checkpoint| {
        if let Some(r) = ckpt.history.last() {
            log::info!(
                "epoch {}: total {:.4} train acc {:.3} val acc {:.3} val loss {:.4} lr {:.2e}",
                r.epoch,
                r.train.total,
                r.train_accuracy,
                r.val_accuracy,
                r.val_loss,
                r.lr
            );
        }
        save_checkpoint(&last, ckpt)?;
        Ok(())
    });
    let fit = core(result)?;
    core(save_checkpoint(&last, &fit.checkpoint))?;
    core(save_checkpoint(&out.join(BEST_CHECKPOINT), &fit.checkpoint.best_snapshot()))?;
    core(write_history_csv(&fit.history, &out.join(HISTORY_FILE)))?;

    let best = fit.checkpoint.best.as_ref();
    Ok(TrainSummary {
        epochs: fit.history.len(),
        final_val_accuracy: fit.history.last().map_or(f64::NAN, |r| r.val_accuracy),
        best_epoch: best.map(|b| b.epoch),
        best_val_accuracy: best.map(|b| b.val_accuracy),
    })
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Defaults to the checkpoint's available modality.
    pub modality: Option<Modality>,
    /// Defaults to the checkpoint config's `eval.split`.
    pub split: Option<Split>,
    /// Evaluate the latest weights instead of the best-validation ones.
    pub last: bool,
}

/// Evaluates a checkpoint on one split with one modality and writes
/// `report.json` plus, when configured, `curves/<class>.csv` into `out`.
pub fn cmd_eval(checkpoint: &Path, corpus_dir: &Path, out: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let ckpt = core(load_checkpoint(checkpoint)).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let corpus = load_checked_corpus(corpus_dir, &ckpt.config)?;
    let model = if opts.last { ckpt.model() } else { ckpt.best_model() };
    let modality = opts.modality.unwrap_or_else(|| model.available());
    let split = opts.split.unwrap_or(ckpt.config.eval.split);
    let report = core(evaluate(&model, &corpus, split, modality))?;
    core(write_report(&report, out, ckpt.config.eval.write_curves))?;
    let mut manifest = RunManifest::new("eval", &ckpt.config);
    manifest.corpus_dir = Some(corpus_dir.display().to_string());
    manifest.corpus_hash = Some(corpus.content_hash());
    manifest.checkpoint = Some(checkpoint.display().to_string());
    manifest.write(out)?;
    Ok(report)
}

/// One line of the ablation table. Summary lines carry `seed = None` and the
/// standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationLine {
    pub variant: Variant,
    pub seed: Option<u64>,
    pub modality: Modality,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub accuracy_std: Option<f64>,
    pub macro_f1_std: Option<f64>,
    pub corpus_hash: String,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    variant: &'a str,
    seed: String,
    modality: &'a str,
    accuracy: f64,
    macro_f1: f64,
    accuracy_std: Option<f64>,
    macro_f1_std: Option<f64>,
    corpus_hash: &'a str,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and evaluates every variant for seeds `cfg.seed .. cfg.seed + seeds`
/// and writes `ablation.csv`: one row per run, then one `mean` row per
/// variant.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    corpus_dir: &Path,
    out: &Path,
    seeds: usize,
    parallel: bool,
    force: bool,
) -> Result<Vec<AblationLine>> {
    if seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let corpus = load_checked_corpus(corpus_dir, cfg)?;
    prepare_out_dir(out, force)?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| cfg.seed + i).collect();
    let mut manifest = RunManifest::new("ablate", cfg);
    manifest.corpus_dir = Some(corpus_dir.display().to_string());
    manifest.corpus_hash = Some(corpus.content_hash());
    manifest.seeds = Some(&seed_list);
    manifest.write(out)?;

    let jobs: Vec<(Variant, u64)> = Variant::ALL.iter().flat_map(|&v| seed_list.iter().map(move |&s| (v, s))).collect();
    let run = |&(variant, seed): &(Variant, u64)| {
        let mut c = cfg.clone();
        c.seed = seed;
        log::info!("ablation: {variant} seed {seed}");
        core(run_ablation(&corpus, variant, &c))
    };
    let rows = if parallel {
        jobs.par_iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        jobs.iter().map(run).collect::<Result<Vec<_>>>()?
    };

    let mut lines: Vec<AblationLine> = rows
        .iter()
        .map(|r| AblationLine {
            variant: r.variant,
            seed: Some(r.seed),
            modality: r.modality,
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            accuracy_std: None,
            macro_f1_std: None,
            corpus_hash: r.corpus_hash.clone(),
        })
        .collect();
    for variant in Variant::ALL {
        let mine: Vec<_> = rows.iter().filter(|r| r.variant == variant).collect();
        let (acc, acc_sd) = mean_std(&mine.iter().map(|r| r.accuracy).collect::<Vec<_>>());
        let (f1, f1_sd) = mean_std(&mine.iter().map(|r| r.macro_f1).collect::<Vec<_>>());
        lines.push(AblationLine {
            variant,
            seed: None,
            modality: mine[0].modality,
            accuracy: acc,
            macro_f1: f1,
            accuracy_std: Some(acc_sd),
            macro_f1_std: Some(f1_sd),
            corpus_hash: mine[0].corpus_hash.clone(),
        });
    }

    let path = out.join(ABLATION_FILE);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    for l in &lines {
        w.serialize(CsvRow {
            variant: l.variant.name(),
            seed: l.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
            modality: l.modality.as_str(),
            accuracy: l.accuracy,
            macro_f1: l.macro_f1,
            accuracy_std: l.accuracy_std,
            macro_f1_std: l.macro_f1_std,
            corpus_hash: &l.corpus_hash,
        })?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(lines)
}

/// Sizes the global rayon pool from `MTUT_NUM_WORKERS` when it is set.
pub fn init_workers(value: Option<&str>) -> Result<()> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| usage(format!("MTUT_NUM_WORKERS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        bail!(UsageError("MTUT_NUM_WORKERS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}
