use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cropcast::pipeline::TrainingMetrics;

fn cropcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cropcast")).args(args).output().expect("binary runs")
}

fn synth(dir: &Path, extra: &[&str]) {
    let d = dir.to_str().unwrap();
    let out = cropcast(&[&["synth", "--dir", d], extra].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn config(dir: &Path) -> String {
    dir.join("pipeline.toml").to_str().unwrap().to_string()
}

#[test]
fn missing_config_exits_with_config_error() {
    let out = cropcast(&["run", "--config", "/nonexistent/pipeline.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let out = cropcast(&["mask"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_reports_each_problem() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let cfg = config(dir.path());
    let out = cropcast(&["validate", "--config", &cfg]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");

    let text = fs::read_to_string(&cfg).unwrap();
    let broken = text
        .replace("test_frac = 0.15", "test_frac = 0.05")
        .replace("stacks = \"stacks\"", "stacks = \"no_such_dir\"");
    fs::write(&cfg, broken).unwrap();
    let out = cropcast(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("split spec")), "{stdout}");
    assert!(stdout.lines().any(|l| l.contains("no_such_dir") && l.contains("does not exist")), "{stdout}");
}

#[test]
fn stage_by_stage_matches_full_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let cfg = config(dir.path());
    let full = dir.path().join("full");
    let staged = dir.path().join("staged");

    let out = cropcast(&["run", "--config", &cfg, "--out", full.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for stage in ["select-crops", "mask", "features", "forecast-features", "train", "predict", "report"] {
        let out = cropcast(&[stage, "--config", &cfg, "--out", staged.to_str().unwrap()]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let manifest: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(full.join("manifest.json")).unwrap()).unwrap();
    assert!(!manifest.is_empty());
    for entry in manifest {
        let rel = entry["path"].as_str().unwrap();
        assert_eq!(fs::read(full.join(rel)).unwrap(), fs::read(staged.join(rel)).unwrap(), "{rel} differs");
    }
}

#[test]
fn noiseless_scene_is_fitted_closely() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--sigma", "0"]);
    let cfg = config(dir.path());
    let out = cropcast(&["run", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: TrainingMetrics =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out").join("metrics.json")).unwrap()).unwrap();
    let r2 = m.heldout_r2.unwrap();
    assert!(r2 >= 0.99, "held-out R² {r2}");
}

#[test]
fn standalone_report_matches_inputs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let prod = dir.path().join("production");
    let mut grids: Vec<_> = fs::read_dir(&prod)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "grdh"))
        .collect();
    grids.sort();
    let (base, pred) = (&grids[grids.len() - 2], &grids[grids.len() - 1]);
    let out_dir = dir.path().join("rep");
    let out = cropcast(&[
        "report",
        "--pred",
        pred.to_str().unwrap(),
        "--baseline",
        base.to_str().unwrap(),
        "--zones",
        dir.path().join("zones.grdh").to_str().unwrap(),
        "--crop",
        "Maize",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed = cropcast::report::parse_report(&out_dir.join("report.csv")).unwrap();
    assert!(!parsed.rows.is_empty());
    assert!(out_dir.join("ratio.pgm").exists());
}
