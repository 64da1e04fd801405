//! End-to-end runs of the `mtut` binary on tiny corpora.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 5

[data]
identities = 3
per_identity = 6
split_fractions = [0.5, 0.25, 0.25]

[trainer]
epochs = 2
batch_size = 4
"#;

fn mtut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtut")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn mtut_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtut")).args(args).env(key, value).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    dir: TempDir,
    config: PathBuf,
    corpus: PathBuf,
}

impl Setup {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, format!("{TINY}{extra}")).unwrap();
        let corpus = dir.path().join("corpus");
        let o = mtut(&["synth", "--config", s(&config), "--out", s(&corpus)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Self { dir, config, corpus }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec!["train", "--config", s(&self.config), "--corpus", s(&self.corpus), "--out", s(&out)];
        args.extend_from_slice(extra);
        mtut(&args)
    }
}

fn dir_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// `metric -> values by epoch` for one split of a long-format history CSV.
fn history_column(path: &Path, split: &str, metric: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap())
        .filter(|rec| &rec[1] == split && &rec[2] == metric)
        .map(|rec| rec[3].parse().unwrap())
        .collect()
}

#[test]
fn synth_defaults_and_seed_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = mtut(&["synth", "--seed", "7", "--out", s(&a)]);
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    let text = String::from_utf8_lossy(&oa.stdout);
    assert!(text.contains("10 identities, 200 samples"), "{text}");
    let ob = mtut(&["synth", "--seed", "7", "--out", s(&b)]);
    assert_eq!(code(&ob), 0);
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(fa.len(), 1 + 200 + 200 + 2);
    assert_eq!(fa, fb);

    let manifest: serde_json::Value = serde_json::from_slice(&fa[Path::new("manifest.json")]).unwrap();
    assert_eq!(manifest["dims"]["height"], 32);
    assert_eq!(manifest["dims"]["points"], 256);
}

#[test]
fn synth_refuses_non_empty_dir_without_force() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let o = mtut(&["synth", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = mtut(&["synth", "--out", s(dir.path()), "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn train_writes_run_directory_and_eval_is_repeatable() {
    let st = Setup::new("");
    let o = st.train("run", &["--missing", "points"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = st.path("run");
    for f in ["last.ckpt", "best.ckpt", "history.csv", "run_manifest.json", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["trainer"]["missing"], "points");
    assert_eq!(manifest["config"]["seed"], 5);
    assert_eq!(manifest["corpus_hash"].as_str().unwrap().len(), 64);
    assert_eq!(history_column(&run.join("history.csv"), "val", "accuracy").len(), 2);

    // the echoed config reproduces the run bit for bit
    let echo = run.join("config.toml");
    let again = st.path("again");
    let o = mtut(&["train", "--config", s(&echo), "--corpus", s(&st.corpus), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(run.join("last.ckpt")).unwrap(), fs::read(again.join("last.ckpt")).unwrap());
    assert_eq!(fs::read(run.join("history.csv")).unwrap(), fs::read(again.join("history.csv")).unwrap());

    let ckpt = run.join("best.ckpt");
    let (e1, e2) = (st.path("eval1"), st.path("eval2"));
    for e in [&e1, &e2] {
        let o = mtut(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&st.corpus), "--out", s(e)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("image on test"));
    }
    let r1 = fs::read(e1.join("report.json")).unwrap();
    assert_eq!(r1, fs::read(e2.join("report.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    assert_eq!(report["modality"], "image");
    assert_eq!(report["samples"], 3 * 6 - 3 * 3 - 3 * 2);
    for class in 0..3 {
        let name = report["per_class"][class]["name"].as_str().unwrap();
        let curve = fs::read_to_string(e1.join("curves").join(format!("{name}.csv"))).unwrap();
        assert!(curve.starts_with("fpr,tpr\n"));
    }

    let train_eval = st.path("eval_train");
    let o = mtut(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&st.corpus), "--out", s(&train_eval), "--split", "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(train_eval.join("report.json")).unwrap()).unwrap();
    assert_eq!((report["split"].as_str(), report["samples"].as_u64()), (Some("train"), Some(9)));
}

#[test]
fn evaluating_the_missing_modality_explains_aux_mode() {
    let st = Setup::new("");
    let o = st.train("run", &["--missing", "image"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = st.path("run").join("last.ckpt");
    let o = mtut(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&st.corpus), "--out", s(&st.path("e")), "--modality", "image"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("aux_mode"), "{}", stderr(&o));
}

#[test]
fn unimodal_ablation_has_zero_autoencoder_columns_and_no_second_encoder() {
    let st = Setup::new("");
    let o = st.train("utut", &["--ablation", "utut", "--missing", "image"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hist = st.path("utut").join("history.csv");
    for metric in ["aed", "recon", "rho"] {
        assert_eq!(history_column(&hist, "train", metric), vec![0.0, 0.0], "{metric}");
    }
    let ckpt = st.path("utut").join("last.ckpt");
    let o = mtut(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&st.corpus), "--out", s(&st.path("e")), "--modality", "image"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no image encoder"), "{}", stderr(&o));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let st = Setup::new("");
    let three = st.path("three.toml");
    fs::write(&three, fs::read_to_string(&st.config).unwrap().replace("epochs = 2", "epochs = 3")).unwrap();
    let one = st.path("one.toml");
    fs::write(&one, fs::read_to_string(&st.config).unwrap().replace("epochs = 2", "epochs = 1")).unwrap();

    let corpus = s(&st.corpus);
    let (straight, part) = (st.path("straight"), st.path("part"));
    let o = mtut(&["train", "--config", s(&three), "--corpus", corpus, "--out", s(&straight)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mtut(&["train", "--config", s(&one), "--corpus", corpus, "--out", s(&part)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let last = part.join("last.ckpt");
    let o = mtut(&["train", "--config", s(&three), "--corpus", corpus, "--out", s(&part), "--resume", s(&last)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    assert_eq!(fs::read(straight.join("history.csv")).unwrap(), fs::read(part.join("history.csv")).unwrap());
    let manifest = fs::read_to_string(part.join("run_manifest.json")).unwrap();
    assert!(manifest.contains("resumed_from"));

    // a best-epoch snapshot cannot be resumed; a different seed is incompatible
    let best = straight.join("best.ckpt");
    let o = mtut(&["train", "--config", s(&three), "--corpus", corpus, "--out", s(&st.path("x")), "--resume", s(&best)]);
    assert_ne!(code(&o), 0);
    let o = mtut(&["train", "--config", s(&three), "--corpus", corpus, "--out", s(&part), "--resume", s(&last), "--seed", "6"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn corpus_dimension_mismatch_fails_before_training() {
    let st = Setup::new("");
    let other = st.path("other.toml");
    fs::write(&other, TINY.replace("identities = 3", "identities = 4")).unwrap();
    let out = st.path("run");
    let o = mtut(&["train", "--config", s(&other), "--corpus", s(&st.corpus), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("identities"), "{}", stderr(&o));
    assert!(!out.join("last.ckpt").exists());
}

#[test]
fn ablation_table_has_runs_and_summaries() {
    let st = Setup::new("");
    let cfg1 = st.path("one.toml");
    fs::write(&cfg1, fs::read_to_string(&st.config).unwrap().replace("epochs = 2", "epochs = 1")).unwrap();
    let out = st.path("abl");
    let o = mtut(&["ablate", "--config", s(&cfg1), "--corpus", s(&st.corpus), "--out", s(&out), "--missing", "points"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let mut r = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, ["variant", "seed", "modality", "accuracy", "macro_f1", "accuracy_std", "macro_f1_std", "corpus_hash"]);
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 15 + 5);
    let hash = &rows[0][7];
    assert!(rows.iter().all(|row| &row[7] == hash && &row[2] == "image"));

    let runs: Vec<_> = rows.iter().filter(|row| &row[1] != "mean").collect();
    let summaries: Vec<_> = rows.iter().filter(|row| &row[1] == "mean").collect();
    assert_eq!((runs.len(), summaries.len()), (15, 5));
    for sum in summaries {
        let mine: Vec<_> = runs.iter().filter(|row| row[0] == sum[0]).collect();
        let seeds: Vec<&str> = mine.iter().map(|row| &row[1]).collect();
        assert_eq!(seeds, ["5", "6", "7"]);
        for col in [3, 4] {
            let vals: Vec<f64> = mine.iter().map(|row| row[col].parse().unwrap()).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            let got: f64 = sum[col].parse().unwrap();
            assert!((got - mean).abs() < 1e-12, "{} col {col}: {got} vs {mean}", &sum[0]);
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
            let got_sd: f64 = sum[col + 2].parse().unwrap();
            assert!((got_sd - sd).abs() < 1e-12);
        }
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mtut(&["frobnicate"])), 1);
    assert_eq!(code(&mtut(&["train", "--missing", "smell"])), 1);
    assert_eq!(code(&mtut(&["--help"])), 0);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[trainer]\nepochz = 3\n").unwrap();
    let o = mtut(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("epochz"));

    let o = mtut_env(&["synth", "--out", s(&dir.path().join("d"))], "MTUT_NUM_WORKERS", "lots");
    assert_eq!(code(&o), 1);
    let o = mtut_env(&["synth", "--out", s(&dir.path().join("e"))], "MTUT_NUM_WORKERS", "1");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn unreadable_corpus_is_a_data_error() {
    let st = Setup::new("");
    fs::remove_file(st.corpus.join("splits.csv")).unwrap();
    let o = st.train("run", &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
