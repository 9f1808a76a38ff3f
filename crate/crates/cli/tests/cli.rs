use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_additive-lab"))
        .args(args)
        .env("ADDITIVE_LAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn dry_run_echoes_overrides() {
    let out = lab(&["run", "--preset", "figure1", "--d", "32", "--J", "64", "--dry-run"]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = stdout_json(&out);
    assert_eq!(cfg["target"]["d"], 32);
    assert_eq!(cfg["network"]["J"], 64);
    assert_eq!(cfg["train"]["T1"], 1_000_000);
}

#[test]
fn validate_fills_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), r#"{"preset": "bihari_sweep", "bihari": {"cases": 5}}"#);
    let out = lab(&["validate", &path]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = stdout_json(&out);
    assert_eq!(cfg["bihari"]["cases"], 5);
    assert_eq!(cfg["bihari"]["horizon"], 100_000);
}

#[test]
fn malformed_number_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), r#"{"preset": "figure1", "train": {"eta0": "fast"}}"#);
    let out = lab(&["run", &path]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.eta0"), "{err}");
}

#[test]
fn empty_custom_config_lists_required_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), r#"{"preset": "custom"}"#);
    let out = lab(&["validate", &path]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for k in ["target", "network", "train"] {
        assert!(err.contains(k), "{err}");
    }
}

#[test]
fn unknown_preset_is_a_config_error() {
    let out = lab(&["run", "--preset", "figure9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn passing_run_exits_zero_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("so");
    let out = lab(&["run", "--preset", "superortho", "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out_dir.join("resolved_config.json").exists());
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], true);
    assert_eq!(summary, stdout_json(&out));
}

#[test]
fn failed_check_exits_four() {
    // an impossible ceiling forces the check to fail
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), r#"{"preset": "superortho", "superortho": {"tol_pair": 0.0}}"#);
    let out_dir = dir.path().join("so");
    let out = lab(&["run", &path, "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stdout_json(&out)["checks"]["pair"], false);
}

#[test]
fn parameter_precondition_exits_two() {
    // quadrature order below what the degree-20 polynomial needs
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), r#"{"preset": "superortho", "superortho": {"order": 8}}"#);
    let out_dir = dir.path().join("so");
    let out = lab(&["run", &path, "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("resolved_config.json").exists());
    assert!(out_dir.join("error.json").exists());
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("f1");
    let out = lab(&[
        "run",
        "--preset",
        "figure1",
        "--d",
        "4",
        "--M",
        "2",
        "--J",
        "4",
        "--T1",
        "50",
        "--snapshot-every",
        "10",
        "--eta0",
        "1e308",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["error"], "numeric");
}
