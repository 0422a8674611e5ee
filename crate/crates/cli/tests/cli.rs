//! Drives the `can` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{"loops": 2, "k": 10, "pretrain_steps": 50, "hidden": [8], "bottleneck": 4}"#;

fn can(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_can")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = can(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_moons(dir: &Path) {
    ok(&["gen", "--kind", "moons", "--rotation", "30", "--noise", "0.05", "--per-class", "60", "--seed", "7", "--out", p(dir)]);
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.json");
    std::fs::write(&path, SMALL).unwrap();
    path
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_moons(&a);
    gen_moons(&b);
    for f in ["source.csv", "target.csv", "dataset.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_blobs_writes_requested_shape() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--kind", "blobs", "--classes", "4", "--dims", "8", "--per-class", "10", "--rotation", "40", "--out", p(tmp.path())]);
    let text = std::fs::read_to_string(tmp.path().join("source.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').filter(|c| c.starts_with("feature_")).count(), 8);
    assert_eq!(lines.count(), 40);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(can(&["gen", "--out", "x"]).status.code(), Some(2));
    assert_eq!(can(&["gradcheck", "--rtol", "abc"]).status.code(), Some(2));
    assert_eq!(can(&["train", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    assert_eq!(can(&["train", "--data", p(&missing), "--out", p(&tmp.path().join("run"))]).status.code(), Some(1));
}

#[test]
fn train_writes_artifacts_and_manifest_replays_them() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_moons(&data);
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    let out = ok(&["train", "--method", "can", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    for f in ["manifest.json", "metrics.jsonl", "summary.json", "checkpoint.txt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);
    assert!(json(&out)["final_target_accuracy"].is_f64());

    let replay = tmp.path().join("replay");
    ok(&["train", "--manifest", p(&run.join("manifest.json")), "--out", p(&replay)]);
    for f in ["metrics.jsonl", "summary.json", "checkpoint.txt"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(replay.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_moons(&data);
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--config", p(&cfg), "--loops", "1", "--beta", "0.7", "--data", p(&data), "--out", p(&run)]);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["loops"], 1);
    assert_eq!(m["config"]["beta"], 0.7);
    assert_eq!(m["config"]["k"], 10);
    assert_eq!(m["config"]["hidden"], serde_json::json!([8]));
}

#[test]
fn zero_beta_matches_source_only() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_moons(&data);
    let cfg = small_config(tmp.path());
    let a = ok(&["train", "--method", "can", "--beta", "0", "--seed", "3", "--config", p(&cfg), "--data", p(&data), "--out", p(&tmp.path().join("a"))]);
    let b = ok(&["train", "--method", "source-only", "--seed", "3", "--config", p(&cfg), "--data", p(&data), "--out", p(&tmp.path().join("b"))]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn eval_reports_checkpoint_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_moons(&data);
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    let train = json(&ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]));
    let eval = json(&ok(&["eval", "--checkpoint", p(&run.join("checkpoint.txt")), "--data", p(&data.join("target.csv"))]));
    assert_eq!(eval["samples"], 120);
    assert_eq!(eval["accuracy"], train["final_target_accuracy"]);
    assert_eq!(eval["per_class_accuracy"].as_array().unwrap().len(), 2);
}

#[test]
fn ablate_covers_methods_and_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_moons(&data);
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("ablate");
    let rows = json(&ok(&["ablate", "--config", p(&cfg), "--data", p(&data), "--seeds", "2", "--methods", "source-only,can", "--out", p(&out)]));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["method"], "can");
    assert_eq!(rows[1]["target_accuracy"].as_array().unwrap().len(), 2);
    assert!(out.join("ablation.json").is_file());
    assert!(out.join("can-seed1").join("summary.json").is_file());
}

#[test]
fn gradcheck_passes_by_default_and_fails_at_tiny_tolerance() {
    let report = json(&ok(&["gradcheck"]));
    assert_eq!(report["components"].as_array().unwrap().len(), 3);
    assert_eq!(can(&["gradcheck", "--rtol", "1e-12"]).status.code(), Some(1));
}
