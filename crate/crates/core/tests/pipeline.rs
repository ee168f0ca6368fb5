//! End-to-end runs of the `ctbert` binary on a small synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ctbert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctbert"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr has an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {last}"))
}

fn write_config(ws: &Path) -> PathBuf {
    let text = format!(
        r#"seed = 11
mlp_grid = true

[data]
root = "{root}"
seg_corpus = "{seg}"

[unet]
depth = 2
base_width = 4
work_size = 32

[unet_train]
max_epochs = 2

[model]
crop_size = 64

[model.backbone]
widths = [8, 16, 32, 512]
blocks = [1, 1, 1, 1]
stem_mid = 8

[classifier]
max_epochs = 2
batch_size = 2

[mlp]
max_epochs = 3
"#,
        root = ws.join("data").display(),
        seg = ws.join("seg").display()
    );
    let path = ws.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_run_is_resumable_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path();
    ok(&ctbert(&[
        "--seed", "5", "synth", arg(ws), "--per-class", "2", "--seg-pairs", "8",
        "--min-slices", "10", "--max-slices", "14",
    ]));
    let config = write_config(ws);
    let out1 = ws.join("out1");
    let out2 = ws.join("out2");

    let first = ok(&ctbert(&["--config", arg(&config), "--output", arg(&out1), "all"]));
    assert_eq!(first.matches(": done").count(), 8, "{first}");
    for rel in [
        "reports/metrics_val.json",
        "reports/mlp_grid.json",
        "predictions/test_mlp.csv",
        "features/train.fcv1",
        "models/classifier.ckpt",
    ] {
        assert!(out1.join(rel).is_file(), "missing {rel}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out1.join("reports/metrics_val.json")).unwrap()).unwrap();
    let levels: Vec<&str> = metrics
        .as_array()
        .expect("one entry per level")
        .iter()
        .map(|m| {
            let acc = m["metrics"]["accuracy"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&acc), "{m}");
            m["level"].as_str().unwrap()
        })
        .collect();
    assert!(levels.contains(&"bert") && levels.contains(&"mlp"), "{metrics}");

    let preds = fs::read_to_string(out1.join("predictions/test_mlp.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 4, "{preds}");

    let again = ok(&ctbert(&["--config", arg(&config), "--output", arg(&out1), "all"]));
    assert_eq!(again.matches("already complete").count(), 8, "{again}");

    ok(&ctbert(&["--config", arg(&config), "--output", arg(&out2), "--force", "all"]));
    for rel in ["predictions/test_mlp.csv", "reports/metrics_val.json"] {
        assert_eq!(
            fs::read(out1.join(rel)).unwrap(),
            fs::read(out2.join(rel)).unwrap(),
            "{rel} differs between runs"
        );
    }
}

#[test]
fn missing_stage_reports_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ctbert(&["--output", arg(&tmp.path().join("empty")), "predict"]);
    let err = error_line(&out);
    assert!(err["error"].is_string(), "{err}");
    assert!(err["message"].as_str().unwrap().contains("train-classifier"), "{err}");
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "seed = 1\nnot_a_field = 2\n").unwrap();
    let err = error_line(&ctbert(&["--config", arg(&path), "show-config"]));
    assert!(err["message"].as_str().unwrap().contains("bad.toml"), "{err}");
}

#[test]
fn show_config_round_trips() {
    let text = ok(&ctbert(&["show-config"]));
    let cfg = ctbert::config::RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, ctbert::config::RunConfig::default());
}
