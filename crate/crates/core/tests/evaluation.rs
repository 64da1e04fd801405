mod common;

use mtut_core::evalkit::write_report;
use mtut_core::{evaluate, fit, EvalError, ExperimentConfig, Modality, Model, Split, Variant};

fn trained(missing: Modality, variant: Variant) -> (mtut_core::Corpus, Model) {
    let corpus = common::tiny_corpus(17, 3, 6);
    let mut cfg = ExperimentConfig::default();
    variant.apply(&mut cfg);
    cfg.data.identities = 3;
    cfg.trainer.missing = missing;
    cfg.trainer.epochs = 2;
    cfg.trainer.batch_size = 6;
    let out = fit(&corpus, &cfg).unwrap();
    (corpus, out.checkpoint.best_model())
}

#[test]
fn other_modality_is_never_read() {
    for missing in [Modality::Image, Modality::Points] {
        let (corpus, model) = trained(missing, Variant::MtutAedAttr);
        let avail = missing.other();
        let before = model.params.clone();
        let clean = evaluate(&model, &corpus, Split::Test, avail).unwrap();
        let mut poisoned = corpus.clone();
        for s in &mut poisoned.samples {
            match missing {
                Modality::Image => s.image.pixels.iter_mut().for_each(|v| *v = f64::NAN),
                Modality::Points => s.cloud.coords.iter_mut().for_each(|v| *v = f64::NAN),
            }
        }
        let again = evaluate(&model, &poisoned, Split::Test, avail).unwrap();
        assert_eq!(clean, again);
        assert_eq!(model.params, before);
    }
}

#[test]
fn repeated_evaluation_is_identical() {
    let (corpus, model) = trained(Modality::Points, Variant::Utut);
    let a = evaluate(&model, &corpus, Split::Test, Modality::Image).unwrap();
    let b = evaluate(&model, &corpus, Split::Test, Modality::Image).unwrap();
    assert_eq!(a, b);
    let total: usize = a.confusion.iter().flatten().sum();
    let trace: usize = (0..a.confusion.len()).map(|i| a.confusion[i][i]).sum();
    assert_eq!(total, a.samples);
    assert!((a.accuracy - trace as f64 / total as f64).abs() < 1e-12);
}

#[test]
fn missing_modality_is_refused_with_explanation() {
    let (corpus, model) = trained(Modality::Image, Variant::MtutAedAttr);
    let err = evaluate(&model, &corpus, Split::Test, Modality::Image).unwrap_err();
    assert!(matches!(err, EvalError::MissingModality(Modality::Image)));
    assert!(err.to_string().contains("aux_mode"), "{err}");
}

#[test]
fn unimodal_model_has_no_other_encoder() {
    let (corpus, model) = trained(Modality::Image, Variant::Utut);
    let err = evaluate(&model, &corpus, Split::Test, Modality::Image).unwrap_err();
    assert!(matches!(err, EvalError::EncoderAbsent(Modality::Image)), "{err}");
}

#[test]
fn report_and_curves_are_written() {
    let (corpus, model) = trained(Modality::Image, Variant::Utut);
    let report = evaluate(&model, &corpus, Split::Test, Modality::Points).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(&report, dir.path(), true).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    for key in ["modality", "accuracy", "macro_f1", "macro_auc", "per_class", "confusion"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let curves: Vec<_> = std::fs::read_dir(dir.path().join("curves")).unwrap().collect();
    assert_eq!(curves.len(), report.curves.len());
    assert!(!curves.is_empty());
    let first = std::fs::read_to_string(curves[0].as_ref().unwrap().path()).unwrap();
    assert!(first.starts_with("fpr,tpr\n"));
}
