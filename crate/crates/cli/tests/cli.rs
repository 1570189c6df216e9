use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn pcmvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcmvt")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path, extra: serde_json::Value) -> std::path::PathBuf {
    let mut cfg = json!({
        "mode": "simulate_study",
        "sim": { "n_patients": 80, "scenario": "fixed", "theta": 0.9 },
        "cv": { "outer_k": 2, "inner_k": 2 },
        "models": { "kinds": ["cox_ridge"] },
        "repeats": 2,
        "explain": { "n_perturbations": 60 },
        "bands": { "n_boot": 20 },
        "seed": 5
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_writes_trial_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let out = tmp.path().join("sim");
    let o = pcmvt(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trial = std::fs::read_to_string(out.join("trial.csv")).unwrap();
    assert!(trial.lines().count() > 80);
    assert!(out.join("truth.csv").exists());
}

#[test]
fn run_twice_gives_identical_tables_and_report_renders() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = pcmvt(&["run", "--config", cfg.to_str().unwrap(), "--workers", "1", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["repeats"].as_array().unwrap().len(), 2);
        assert_eq!(manifest["seed"], 5);
        assert!(out.join("repeat_000").is_dir() && out.join("repeat_001").is_dir());
        tables.push(std::fs::read(out.join("aggregate.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);

    let bundle = tmp.path().join("a");
    let o = pcmvt(&["report", bundle.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(summary.contains("aggregate.csv"));
    assert!(bundle.join("report/repeat_000_roc.svg").exists());
    assert!(stderr(&o).is_empty());

    // tamper with a recorded artifact
    std::fs::write(bundle.join("aggregate.csv"), "tampered\n").unwrap();
    let o = pcmvt(&["report", "--out", bundle.to_str().unwrap()]);
    assert!(stderr(&o).contains("integrity"), "{}", stderr(&o));
}

#[test]
fn comparison_table_holds_both_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({ "compare_pcm": true, "repeats": 1, "explain_responders": false }));
    let out = tmp.path().join("cmp");
    let o = pcmvt(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(table.contains("pcm") && table.contains("no_pcm"), "{table}");
}

#[test]
fn invalid_config_fails_with_stage_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({ "repeats": 0 }));
    let o = pcmvt(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `config`"), "{}", stderr(&o));

    let o = pcmvt(&["run", "--config", tmp.path().join("absent.json").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent.json"));
}

#[test]
fn report_on_missing_bundle_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pcmvt(&["report", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("stage `report`") && err.contains("manifest.json"), "{err}");
}

#[test]
fn failing_stage_is_reported_and_manifest_is_partial() {
    let tmp = tempfile::tempdir().unwrap();
    // every candidate needs more events than two patients can supply
    let cfg = small_config(
        tmp.path(),
        json!({ "sim": { "n_patients": 2, "scenario": "fixed", "theta": 0.9 }, "repeats": 1 }),
    );
    let out = tmp.path().join("fail");
    let o = pcmvt(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `"), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert!(manifest["failed_stage"].is_string());
}
