use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gct_harness::error::{EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK};
use gct_harness::train::METRICS_HEADER;

fn gct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gct"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const TINY: &str = r#"{
  "network": "smallcnn",
  "placement": "before_conv",
  "output_dir": "out",
  "train": { "epochs": 1, "batch_size": 16, "warmup_epochs": 0, "decay_epochs": [] },
  "dataset": { "kind": "synthetic", "synthetic": { "train_size": 32, "val_size": 16, "size": 8 } }
}"#;

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = gct(&["train", "--config", &cfg]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let lines: Vec<_> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(dir.path().join("out/checkpoint.bin").is_file());
    assert!(dir.path().join("out/run_config.json").is_file());
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let other = dir.path().join("elsewhere");
    let out = gct(&["train", "--config", &cfg, "--epochs", "2", "--output-dir", other.to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_OK);
    let metrics = fs::read_to_string(other.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"network": "smallcnn", "nonsense": 1}"#);
    assert_eq!(code(&gct(&["train", "--config", &cfg])), EXIT_CONFIG);
    let cfg = write_config(dir.path(), r#"{"train": {"base_lr": -1.0}}"#);
    assert_eq!(code(&gct(&["train", "--config", &cfg])), EXIT_CONFIG);
    assert_eq!(code(&gct(&["count-cost", "--spec", "no_such_net"])), EXIT_CONFIG);
}

#[test]
fn config_errors_precede_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"network": "unknown_net", "output_dir": "out"}"#);
    assert_eq!(code(&gct(&["train", "--config", &cfg])), EXIT_CONFIG);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_or_corrupt_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"dataset": {"kind": "cifar10", "train_paths": ["absent.bin"], "val_paths": ["absent.bin"]}}"#,
    );
    assert_eq!(code(&gct(&["train", "--config", &cfg])), EXIT_DATA);

    fs::write(dir.path().join("short.bin"), [0u8; 100]).unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"dataset": {"kind": "cifar10", "train_paths": ["short.bin"], "val_paths": ["short.bin"]}}"#,
    );
    assert_eq!(code(&gct(&["train", "--config", &cfg])), EXIT_DATA);
}

#[test]
fn divergent_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &TINY.replace(r#""epochs": 1"#, r#""epochs": 3, "base_lr": 1e30, "momentum": 0.0"#),
    );
    let out = gct(&["train", "--config", &cfg]);
    assert_eq!(code(&out), EXIT_NUMERIC, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_exit_status_tracks_the_result() {
    assert_eq!(code(&gct(&["gradcheck", "--instances", "2"])), EXIT_OK);
    assert_eq!(code(&gct(&["gradcheck", "--instances", "2", "--corrupt", "1e-3"])), EXIT_NUMERIC);
}

#[test]
fn analyze_rejects_a_network_without_gct() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("before_conv", "none"));
    assert_eq!(code(&gct(&["train", "--config", &cfg])), EXIT_OK);
    let ckpt = dir.path().join("out/checkpoint.bin");
    let out = gct(&["analyze", "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_DATA);
}

#[test]
fn analyze_writes_one_row_per_gct_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(code(&gct(&["train", "--config", &cfg])), EXIT_OK);
    let ckpt = dir.path().join("out/checkpoint.bin");
    let report = dir.path().join("report");
    let out = gct(&[
        "analyze",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(report.join("analysis.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(report.join("gamma_histogram.csv").is_file());
}

#[test]
fn count_cost_prints_json() {
    let out = gct(&["count-cost", "--spec", "smallcnn", "--input-shape", "1,3,32,32", "--placement", "before_conv"]);
    assert_eq!(code(&out), EXIT_OK);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["gct_params"], 3 * (3 + 16 + 32));
    assert_eq!(code(&gct(&["count-cost", "--spec", "smallcnn", "--input-shape", "1,3,32"])), EXIT_CONFIG);
}
