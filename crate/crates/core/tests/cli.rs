//! Exit codes and files of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

fn cellsplit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellsplit")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&cellsplit(&[])), 1);
    assert_eq!(code(&cellsplit(&["frobnicate"])), 1);
    assert_eq!(code(&cellsplit(&["splits", "--n", "ten"])), 1);
    let o = cellsplit(&["post", "--pred", "x", "--out", "y", "--mode", "sideways"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sideways"));
}

#[test]
fn unreadable_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(code(&cellsplit(&["--config", p(&cfg), "splits", "--n", "10"])), 1);
    assert_eq!(code(&cellsplit(&["--config", p(&dir.path().join("absent.json")), "splits", "--n", "10"])), 1);
}

#[test]
fn help_and_version_succeed() {
    let o = cellsplit(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("pipeline"));
    assert_eq!(code(&cellsplit(&["--version"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = cellsplit(&["infer", "--model-dir", p(&dir.path().join("none")), "--dataset", p(dir.path()), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("none"));
    assert_eq!(code(&cellsplit(&["splits", "--n", "5", "--k", "10"])), 2);
}

#[test]
fn synth_labels_train_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let out = dir.path().join("out");
    let ok = |args: &[&str]| {
        let o = cellsplit(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["--seed", "3", "synth", "--out", p(&data), "--count", "3"]);
    for sub in ["images", "points", "masks"] {
        assert_eq!(std::fs::read_dir(data.join(sub)).unwrap().count(), 3, "{sub}");
    }
    ok(&["labels", "--dataset", p(&data), "--out", p(&dir.path().join("labels"))]);
    assert_eq!(std::fs::read_dir(dir.path().join("labels")).unwrap().count(), 9);
    ok(&["train", "--dataset", p(&data), "--model-dir", p(&model), "--epochs", "2", "--depth", "2", "--base-width", "4"]);
    assert!(model.join("topology.json").is_file() && model.join("weights.bin").is_file());
    ok(&["pipeline", "--dataset", p(&data), "--model-dir", p(&model), "--out", p(&out), "--skip-train", "--mode", "split"]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert!(report["aji"].is_number() && report["images"].as_array().unwrap().len() == 3, "{report}");
    let o = ok(&["splits", "--n", "10", "--k", "5", "--fold", "0"]);
    assert!(!o.stdout.is_empty());
}
