use std::path::Path;
use std::process::{Command, Output};

fn svh(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svh"))
        .current_dir(dir)
        .env("SVH_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = svh(dir, args);
    assert!(
        out.status.success(),
        "svh {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// One short epoch keeps the end-to-end runs fast.
const QUICK: &str = r#"{"train": {"epochs": 1}}"#;

fn quick_config(dir: &Path) {
    std::fs::write(dir.join("quick.json"), QUICK).unwrap();
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = svh(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn defaults_round_trip_through_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["config", "--print-defaults"]);
    std::fs::write(dir.path().join("defaults.json"), &out.stdout).unwrap();
    let resolved = ok(dir.path(), &["--config", "defaults.json", "config"]);
    assert_eq!(out.stdout, resolved.stdout);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["train"]["epochs"], 30);
    assert_eq!(v["network"]["head_classes"], serde_json::json!([22, 5, 6]));
}

#[test]
fn invalid_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("unknown.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    assert_eq!(svh(dir.path(), &["--config", "unknown.json", "config"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"pct_up": 1.5}}"#).unwrap();
    assert_eq!(svh(dir.path(), &["--config", "bad.json", "config"]).status.code(), Some(1));
    assert_eq!(svh(dir.path(), &["--config", "missing.json", "config"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "1", "synth", "--patients", "8"]);
    assert_eq!(svh(dir.path(), &["evaluate"]).status.code(), Some(2));
}

#[test]
fn synth_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quick_config(d);
    ok(d, &["--seed", "7", "synth", "--patients", "8"]);
    assert_eq!(std::fs::read_dir(d.join("out/data")).unwrap().count(), 8 * 5);
    ok(d, &["--config", "quick.json", "--seed", "7", "train"]);
    assert!(d.join("out/model.svhc").is_file());
    let metrics = std::fs::read_to_string(d.join("out/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,val_rmse_narrowing,val_rmse_erosion,lr\n"));
    assert_eq!(metrics.lines().count(), 2);

    let out = ok(d, &["--config", "quick.json", "evaluate"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["rmse_narrowing", "rmse_erosion", "mean_center_error_px"] {
        assert!(report[key].as_f64().unwrap().is_finite(), "{key}");
    }
    let saved: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("out/eval.json")).unwrap()).unwrap();
    assert_eq!(saved, report);

    ok(d, &["--config", "quick.json", "predict", "--split", "val"]);
    let csv = std::fs::read_to_string(d.join("out/predictions.csv")).unwrap();
    assert!(csv.starts_with("patient_id,image,joint,task,predicted,truth\n"));
    assert!(csv.lines().count() > 1);
}

#[test]
fn identical_invocations_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quick_config(d);
    let mut artifacts = Vec::new();
    for (out, threads) in [("a", "1"), ("b", "2")] {
        ok(d, &["--out", out, "--seed", "3", "synth", "--patients", "8"]);
        ok(d, &["--config", "quick.json", "--out", out, "--seed", "3", "--threads", threads, "train"]);
        let read = |f: &str| std::fs::read(d.join(out).join(f)).unwrap();
        artifacts.push((read("model.svhc"), read("metrics.csv"), read("data/P000.json"), read("data/P000_LH.png")));
    }
    assert!(artifacts[0] == artifacts[1]);
}

#[test]
fn ensemble_members_use_consecutive_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quick_config(d);
    ok(d, &["--seed", "5", "synth", "--patients", "8"]);
    ok(d, &["--config", "quick.json", "--seed", "5", "train-ensemble", "--n", "2"]);
    let header = |k: usize| {
        let bytes = std::fs::read(d.join(format!("out/ensemble/member_{k}/model.svhc"))).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        serde_json::from_slice::<serde_json::Value>(&bytes[16..16 + len]).unwrap()
    };
    assert_eq!(header(0)["metadata"]["train"]["seed"], 5);
    assert_eq!(header(1)["metadata"]["train"]["seed"], 6);
    let out = ok(d, &["--config", "quick.json", "evaluate", "--ensemble", "out/ensemble"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["rmse_narrowing"].as_f64().unwrap().is_finite());
}

#[test]
fn ablate_p_sweeps_the_standard_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quick_config(d);
    ok(d, &["synth", "--patients", "8"]);
    ok(d, &["--config", "quick.json", "ablate", "--param", "p", "--seeds", "1"]);
    let csv = std::fs::read_to_string(d.join("out/ablation_p.csv")).unwrap();
    let values: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["0", "0.05", "0.1", "0.2"]);
    assert!(std::fs::read_to_string(d.join("out/ablation_p.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn preprocess_writes_network_sized_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--patients", "2"]);
    ok(d, &["preprocess", "--input", "out/data"]);
    let json = std::fs::read_to_string(d.join("out/preprocessed/P000.json")).unwrap();
    assert!(json.contains("\"LF\""));
    let decoder = png::Decoder::new(std::fs::File::open(d.join("out/preprocessed/P000_RH.png")).unwrap());
    let info = decoder.read_info().unwrap();
    assert_eq!((info.info().width, info.info().height), (64, 64));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-4);
}
