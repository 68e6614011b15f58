use std::path::Path;
use std::process::{Command, Output};

use hybrid_reason::synth::SyntheticDataset;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hybrid-reason"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

const CONFIG: &str = r#"{
  "generator": {"n_attributes": 3, "grades": 3, "train": 60, "val": 10, "test": 40, "seed": 2},
  "model": {"encoder_hidden": 8, "feature_dim": 8, "node_dim": 4, "layers": 1, "attention_hidden": 4},
  "train": {"max_epochs": 2, "batch_size": 16}
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    ok(&["gen-data", "--config", "cfg.json", "--out", "data"], dir.path());
    dir
}

#[test]
fn train_is_byte_reproducible() {
    let dir = setup();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(
            &["train", "--config", "cfg.json", "--data", "data/train.json", "--seed", "7", "--out", out],
            d,
        );
    }
    let a = std::fs::read(d.join("a/model.json")).unwrap();
    let b = std::fs::read(d.join("b/model.json")).unwrap();
    assert_eq!(a, b);
    ok(&["train", "--config", "cfg.json", "--data", "data/train.json", "--seed", "8", "--out", "c"], d);
    assert_ne!(a, std::fs::read(d.join("c/model.json")).unwrap());
    let history: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("a/history.json")).unwrap()).unwrap();
    assert_eq!(history.as_array().unwrap().len(), 2);
}

#[test]
fn perfect_predictions_score_one_hundred() {
    let dir = setup();
    let d = dir.path();
    let test = SyntheticDataset::read(&d.join("data/test.json")).unwrap();
    assert!(test.positives() > 0 && test.positives() < test.len());
    let preds: Vec<Vec<f64>> = test
        .grades
        .iter()
        .map(|g| (1..=3).map(|k| if k == g[0] { 1.0 } else { 0.0 }).collect())
        .collect();
    std::fs::write(d.join("perfect.json"), serde_json::to_string(&preds).unwrap()).unwrap();
    let table = ok(
        &["eval", "--predictions", "perfect.json", "--data", "data/test.json", "--out", "rep"],
        d,
    );
    assert!(table.starts_with("accuracy"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("rep/report.json")).unwrap()).unwrap();
    for key in ["accuracy", "sensitivity", "specificity", "auc", "precision", "f_score", "off_by_one"] {
        assert_eq!(report[key]["mean"], 100.0, "{key}");
    }
}

#[test]
fn model_commands_produce_reports() {
    let dir = setup();
    let d = dir.path();
    ok(&["train", "--config", "cfg.json", "--data", "data/train.json", "--out", "m"], d);
    let table = ok(&["eval", "--model", "m/model.json", "--data", "data/test.json"], d);
    assert!(table.contains("attribute 3"));
    let imp = ok(&["importance", "--model", "m/model.json", "--data", "data/test.json", "--out", "imp"], d);
    assert_eq!(imp.lines().count(), 4);
    let rows: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("imp/importance.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);

    let bn = ok(&["inspect-bn", "--model", "m/model.json"], d);
    assert!(bn.starts_with("nodes 4 grades 3"));
    let dump = ok(
        &["inspect-bn", "--model", "m/model.json", "--network", "2", "--messages", "data/test.json", "--sample", "3"],
        d,
    );
    let json_start = dump.find("\n[").unwrap() + 1;
    let steps: serde_json::Value = serde_json::from_str(&dump[json_start..]).unwrap();
    let steps = steps.as_array().unwrap();
    assert_eq!(steps[0]["step"], 0);
    assert_eq!(steps[0]["marginals"].as_array().unwrap().len(), 4);
}

#[test]
fn ablate_reports_both_variants() {
    let dir = setup();
    let d = dir.path();
    let text = ok(
        &[
            "ablate", "--config", "cfg.json", "--data", "data/train.json", "--test", "data/test.json",
            "--repeats", "2", "--no-alter-train", "--out", "abl",
        ],
        d,
    );
    assert!(text.contains("== full") && text.contains("== ablated"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("abl/ablation.json")).unwrap()).unwrap();
    assert_eq!(v[1]["components"]["alternate_training"], false);
    assert_eq!(v[0]["report"]["runs"], 2);

    let cv = ok(&["ablate", "--config", "cfg.json", "--data", "data/train.json", "--folds", "3"], d);
    assert!(cv.contains("(runs 3)"));
}

#[test]
fn failures_are_single_line() {
    let dir = setup();
    let d = dir.path();
    assert!(fail(&["train", "--bogus"], d).starts_with("error: usage:"));
    assert!(fail(&["frobnicate"], d).starts_with("error: usage:"));
    assert!(fail(&["eval", "--model", "missing.json", "--data", "data/test.json"], d).starts_with("error: io:"));
    std::fs::write(d.join("bad.json"), r#"{"train": {"lr": 1}}"#).unwrap();
    assert!(fail(&["train", "--config", "bad.json", "--data", "data/train.json", "--out", "x"], d)
        .starts_with("error: config:"));
    std::fs::write(d.join("weights.json"), r#"{"train": {"loss_weights": [0.5, 0.5, 0.5, 0.5, 0.5]}}"#).unwrap();
    assert!(fail(&["train", "--config", "weights.json", "--data", "data/train.json", "--out", "x"], d)
        .starts_with("error: config:"));
    std::fs::write(d.join("trunc.json"), "{\"version\": 1, \"nodes\"").unwrap();
    assert!(fail(&["eval", "--predictions", "data/test.json", "--data", "trunc.json"], d).starts_with("error: data:"));
    assert_eq!(run(&["train", "--bogus"], d).status.code(), Some(2));
}
