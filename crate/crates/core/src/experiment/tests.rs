use super::*;
use crate::analysis::Mechanism;
use crate::error::Error;
use crate::transformer::{load_checkpoint, params_hash, TrainOutcome};

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::smoke("tiny");
    c.data = DataSpec { count: 120, length: 8 };
    c.model = ModelSpec { n_layers: 2, d_model: 16, n_heads: 2, d_mlp: 32, ..ModelSpec::default() };
    c.optim.batch_size = 16;
    c.optim.shard_size = 8;
    c.optim.eval_count = 40;
    c.stages[0].epochs = 2;
    c.stages[0].target_accuracy = None;
    let a = &mut c.analysis;
    a.n_eval = 40;
    a.n_pairs = 6;
    a.probe_seqs = 40;
    a.head_examples = 3;
    a.pca_seqs = 20;
    c
}

#[test]
fn toml_round_trip_and_defaults() {
    let c = tiny();
    let text = c.to_toml().unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back, c.resolved());
    assert_eq!(back.resolved(), back);
    let minimal = r#"
        name = "m"
        group = 3
        seeds = { init = 1, data = 2, analysis = 3 }
        data = { count = 100, length = 10 }
        [[stages]]
        corpus = { kind = "parity" }
        epochs = 1
        [[stages]]
        corpus = { kind = "word" }
        epochs = 2
        length = 12
    "#;
    let m = ExperimentConfig::from_toml(minimal).unwrap();
    assert_eq!(m.train_len(), 12);
    assert_eq!(m.eval_len(), 24);
    assert_eq!(m.model_config().vocab_size, 8);
    assert_eq!(m.model_config().max_positions, 24);
    assert_eq!(m.head_len(), 24);
}

#[test]
fn bad_configs_are_rejected() {
    let mut c = tiny();
    c.stages.clear();
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny();
    c.stages[0].corpus = StageCorpus::Parity;
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.group = 9;
    assert!(c.validate().is_err());
    assert!(ExperimentConfig::from_toml("name = 1").is_err());
    let unknown = tiny().to_toml().unwrap() + "\nbogus = 3\n";
    assert!(ExperimentConfig::from_toml(&unknown).is_err());
}

#[test]
fn train_and_analyze_are_reproducible() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = run_train(&cfg, a.path(), TrainOptions::default()).unwrap();
    let sb = run_train(&cfg, b.path(), TrainOptions::default()).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(sa.outcome, TrainOutcome::Completed);
    let ra = run_analyze(&cfg, a.path(), None).unwrap();
    let rb = run_analyze(&cfg, b.path(), None).unwrap();
    assert_eq!(ra, rb);
    let bytes = |d: &std::path::Path| std::fs::read(d.join(REPORT)).unwrap();
    assert_eq!(bytes(a.path()), bytes(b.path()));
    for f in ["generalization.csv", "verdict.json", "probes.csv", "heads.csv", "pca.json"] {
        assert!(ra.manifest.iter().any(|m| m.path == format!("analysis/{f}")), "{f} missing from manifest");
    }
    assert!(verify_manifest(a.path(), &ra).unwrap().is_empty());
    assert_eq!(read_report(&a.path().join(REPORT)).unwrap(), ra);
    assert!(ra.phase.is_some());

    std::fs::write(a.path().join("analysis/heads.csv"), "tampered").unwrap();
    assert_eq!(verify_manifest(a.path(), &ra).unwrap(), vec!["analysis/heads.csv".to_string()]);
}

#[test]
fn interrupted_run_resumes_to_the_same_parameters() {
    let mut cfg = tiny();
    cfg.stages.insert(0, Stage { corpus: StageCorpus::Parity, epochs: 1, length: Some(6), count: Some(64), aux_parity: None, target_accuracy: None });
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = run_train(&cfg, a.path(), TrainOptions::default()).unwrap();
    let cut = run_train(&cfg, b.path(), TrainOptions { stop_after_steps: Some(6), ..TrainOptions::default() }).unwrap();
    assert_eq!(cut.outcome, TrainOutcome::Interrupted);
    assert!(b.path().join(RESUME_CHECKPOINT).exists());
    let done = run_train(&cfg, b.path(), TrainOptions { resume: true, ..TrainOptions::default() }).unwrap();
    assert_eq!(done.params_hash, full.params_hash);
    assert_eq!(done.steps, full.steps);
    assert!(!b.path().join(RESUME_CHECKPOINT).exists());
    let (ca, cb) = (load_checkpoint(&a.path().join(FINAL_CHECKPOINT)).unwrap(), load_checkpoint(&b.path().join(FINAL_CHECKPOINT)).unwrap());
    assert_eq!(params_hash(&ca.model), params_hash(&cb.model));
    assert_eq!(ca.log, cb.log);
}

#[test]
fn missing_checkpoint_and_foreign_config() {
    let cfg = tiny();
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(run_analyze(&cfg, d.path(), None), Err(Error::MissingFile(_))));
    let mut other = tiny();
    other.seeds.init = 99;
    assert!(matches!(run_train(&other, d.path(), TrainOptions::default()), Err(Error::Config(_))));
}

#[test]
fn sweep_ratios_sum_to_one() {
    let runs = vec![("a".to_string(), Mechanism::Aa), ("b".into(), Mechanism::Paa), ("c".into(), Mechanism::Aa)];
    let s = summarize_sweep(runs).unwrap();
    assert_eq!(s.counts, [2, 1, 0]);
    assert!((s.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(summarize_sweep(Vec::new()).is_err());
}
