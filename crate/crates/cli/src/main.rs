//! `mtut`: synthesize corpora, train, evaluate and run ablations.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use mtut_cli::{
    cmd_ablate, cmd_eval, cmd_synth, cmd_train, exit_code, init_workers, pick_path, resolve_config, EvalOptions,
    Overrides,
};
use mtut_core::{Modality, Split, Variant};

#[derive(Parser)]
#[command(name = "mtut", version, about = "Multimodal training, unimodal testing for face classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Modality absent at test time.
        #[arg(long)]
        missing: Option<Modality>,
        /// Variant: utut, mtut, mtut+aed, mtut+attr, mtut+aed+attr.
        #[arg(long)]
        ablation: Option<Variant>,
        /// Continue from a last-epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint with one modality.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint's available modality.
        #[arg(long)]
        modality: Option<Modality>,
        /// Defaults to the checkpoint config's eval split.
        #[arg(long)]
        split: Option<Split>,
        /// Use the final weights instead of the best-validation ones.
        #[arg(long)]
        last: bool,
    },
    /// Train and evaluate all five variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        missing: Option<Modality>,
        /// Seeds `seed, seed + 1, ...`.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Run variant/seed jobs concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    init_workers(std::env::var("MTUT_NUM_WORKERS").ok().as_deref())?;
    match cli.command {
        Command::Synth { common, out, force } => {
            let cfg = resolve_config(common.config.as_deref(), &Overrides { seed: common.seed, ..Default::default() })?;
            let out = pick_path(out.as_deref(), cfg.paths.out.as_ref(), "out")?;
            let summary = cmd_synth(&cfg, &out, force)?;
            println!("{summary}");
        }
        Command::Train { common, corpus, out, missing, ablation, resume, force } => {
            let cfg = resolve_config(common.config.as_deref(), &Overrides { seed: common.seed, missing, ablation })?;
            let corpus = pick_path(corpus.as_deref(), cfg.paths.corpus.as_ref(), "corpus")?;
            let out = pick_path(out.as_deref(), cfg.paths.out.as_ref(), "out")?;
            let s = cmd_train(&cfg, &corpus, &out, force, resume.as_deref())?;
            println!(
                "trained {} epochs: final val accuracy {:.4}, best {:.4} at epoch {}",
                s.epochs,
                s.final_val_accuracy,
                s.best_val_accuracy.unwrap_or(f64::NAN),
                s.best_epoch.unwrap_or(0)
            );
        }
        Command::Eval { checkpoint, corpus, out, modality, split, last } => {
            let r = cmd_eval(&checkpoint, &corpus, &out, &EvalOptions { modality, split, last })?;
            println!(
                "{} on {} ({} samples): accuracy {:.4}, macro-F1 {:.4}, macro AUC {:.4}",
                r.modality, r.split, r.samples, r.accuracy, r.macro_f1, r.macro_auc
            );
        }
        Command::Ablate { common, corpus, out, missing, seeds, parallel, force } => {
            let cfg = resolve_config(common.config.as_deref(), &Overrides { seed: common.seed, missing, ablation: None })?;
            let corpus = pick_path(corpus.as_deref(), cfg.paths.corpus.as_ref(), "corpus")?;
            let out = pick_path(out.as_deref(), cfg.paths.out.as_ref(), "out")?;
            for l in cmd_ablate(&cfg, &corpus, &out, seeds, parallel, force)? {
                if l.seed.is_none() {
                    println!(
                        "{:<14} {} accuracy {:.4} ± {:.4}  macro-F1 {:.4} ± {:.4}",
                        l.variant.name(),
                        l.modality,
                        l.accuracy,
                        l.accuracy_std.unwrap_or(0.0),
                        l.macro_f1,
                        l.macro_f1_std.unwrap_or(0.0)
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
