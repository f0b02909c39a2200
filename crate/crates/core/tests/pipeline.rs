use std::fs;

use forgeseg_core::config::{parse_config, RunConfig};
use forgeseg_core::error::Error;
use forgeseg_core::metrics::MetricsReport;
use forgeseg_core::pipeline::{self, run_pipeline, RunLayout, Stage};

fn tiny() -> RunConfig {
    parse_config(
        r#"
seed = 11
[data]
samples = 24
image_size = 32
n_train = 16
n_test = 6
[model]
feature_channels = 8
[train]
steps = 8
batch_size = 4
checkpoint_interval = 4
[eval]
cam_samples = 1
"#,
    )
    .unwrap()
}

#[test]
fn synth_train_eval_writes_every_artifact_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&tiny(), &[Stage::Eval, Stage::Synth, Stage::Train], dir.path()).unwrap();
    let l = RunLayout::new(dir.path());
    for p in [l.config(), l.manifest(), l.log(), l.final_checkpoint(), l.eval().join("report.json"), l.eval().join("report.txt")] {
        assert!(p.exists(), "{}", p.display());
    }
    assert!(l.checkpoints().join("step-000004.ckpt").exists());
    assert!(!l.cam().exists());
    assert_eq!(out.train.unwrap().records.len(), 8);
    // the stored config reproduces itself
    let stored = parse_config(&fs::read_to_string(l.config()).unwrap()).unwrap();
    assert_eq!(stored, tiny());
}

#[test]
fn repeat_runs_give_identical_reports_and_run_dirs_re_evaluate() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline(&tiny(), &Stage::ALL, a.path()).unwrap().report.unwrap();
    let rb = run_pipeline(&tiny(), &Stage::ALL, b.path()).unwrap().report.unwrap();
    assert_eq!(ra, rb);
    let read = |d: &std::path::Path, p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read(a.path(), "eval/report.json"), read(b.path(), "eval/report.json"));
    assert_eq!(read(a.path(), "cam/summary.json"), read(b.path(), "cam/summary.json"));

    // re-evaluate from the run directory alone
    let l = RunLayout::new(a.path());
    let config = parse_config(&fs::read_to_string(l.config()).unwrap()).unwrap();
    let again = tempfile::tempdir().unwrap();
    let r = pipeline::eval(&config, &l.manifest(), &l.eval_checkpoint().unwrap(), again.path()).unwrap();
    let stored: MetricsReport = serde_json::from_slice(&read(a.path(), "eval/report.json")).unwrap();
    assert_eq!(r, stored);
}

#[test]
fn missing_artifacts_are_dependency_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run_pipeline(&tiny(), &[Stage::Eval], dir.path()), Err(Error::Dependency(_))));
    assert!(matches!(run_pipeline(&tiny(), &[Stage::Train], dir.path()), Err(Error::Dependency(_))));
    assert!(matches!(run_pipeline(&tiny(), &[Stage::Cam], dir.path()), Err(Error::Dependency(_))));
    // once synthesised, training alone can run
    run_pipeline(&tiny(), &[Stage::Synth], dir.path()).unwrap();
    run_pipeline(&tiny(), &[Stage::Train], dir.path()).unwrap();
    run_pipeline(&tiny(), &[Stage::Eval], dir.path()).unwrap();
}

#[test]
fn stage_seeds_are_independent() {
    // changing the training seed leaves the corpus untouched
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut other = tiny();
    other.train.seed = Some(12345);
    run_pipeline(&tiny(), &[Stage::Synth], a.path()).unwrap();
    run_pipeline(&other, &[Stage::Synth], b.path()).unwrap();
    assert_eq!(fs::read(a.path().join("data/manifest.jsonl")).unwrap(), fs::read(b.path().join("data/manifest.jsonl")).unwrap());
}
