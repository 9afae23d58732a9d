use std::fs;
use std::path::Path;
use std::process::Command;

use cmmm_cli::{execute, run, EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE};
use serde_json::{json, Value};

fn tiny_config(dir: &Path, extra_train: Value) -> std::path::PathBuf {
    let mut train = json!({"epochs": 2, "hidden": 4, "batch": 2, "lambda": 10.0});
    for (k, v) in extra_train.as_object().unwrap() {
        train[k] = v.clone();
    }
    let cfg = json!({
        "sim": {"n_shops": 6, "n_channels": 2, "length": 24, "n_structures": 2, "narma_order": 3, "seed": 4},
        "train": train,
    });
    let path = dir.join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn ok(args: &[String]) {
    if let Err(f) = execute(args) {
        panic!("{:?} failed: {}", args, f.line());
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn pipeline(root: &Path) {
    let cfg = tiny_config(root, json!({}));
    let data = root.join("data");
    let run_dir = root.join("run");
    let ckpt = run_dir.join("best.ckpt");
    ok(&["gen".into(), "--config".into(), s(&cfg), "--out".into(), s(&data)]);
    ok(&["train".into(), "--config".into(), s(&cfg), "--data".into(), s(&data), "--out".into(), s(&run_dir), "--seed".into(), "1".into(), "--threads".into(), "1".into()]);
    ok(&["eval-structure".into(), "--ckpt".into(), s(&ckpt), "--data".into(), s(&data), "--seeds".into(), "3".into()]);
    ok(&["eval-forecast".into(), "--ckpt".into(), s(&ckpt), "--data".into(), s(&data), "--horizons".into(), "1,3".into(), "--lag".into(), "2".into()]);
    ok(&["infer".into(), "--ckpt".into(), s(&ckpt), "--data".into(), s(&data)]);
    ok(&["baseline".into(), "--data".into(), s(&data), "--out".into(), s(&run_dir), "--lag".into(), "2".into(), "--ridge".into(), "1.0".into()]);
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    pipeline(root.path());
    let run_dir = root.path().join("run");
    for f in ["best.ckpt", "history.csv", "timing.csv", "split.json", "run_config.json", "metrics.json", "structures.json", "baseline_scores.json"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    let history = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,val_auroc,kl_term,nll_term"));
    assert_eq!(history.lines().count(), 3);

    let m = read_json(&run_dir.join("metrics.json"));
    assert_eq!(m["dataset_id"], "sim1-n6-d2-T24-seed4");
    assert_eq!(m["seeds"], 3);
    for k in ["acc_mean", "acc_std", "auroc_mean", "auroc_std", "acc_noise_free", "auroc_noise_free"] {
        assert!(m[k].is_number(), "{k}");
    }
    for k in ["model_m1", "model_m3", "persistence_m1", "persistence_m3", "linear_granger_m1", "linear_granger_m3"] {
        assert!(m["mse"][k].as_f64().unwrap() >= 0.0, "{k}");
    }
    assert!(m["baseline"]["linear_granger"]["auroc_mean"].is_number());
    assert_eq!(m["baseline"]["linear_granger"]["lag"], 2);

    let structures = read_json(&run_dir.join("structures.json"));
    assert_eq!(structures.as_array().unwrap().len(), 6);
    assert_eq!(structures[0]["adjacency"].as_array().unwrap().len(), 3);

    let rc = read_json(&run_dir.join("run_config.json"));
    assert_eq!(rc["train"]["seed"], 1);
    assert_eq!(rc["eval"]["horizons"], json!([1, 3]));
    assert_eq!(rc["baseline"]["lag"], 2);
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["history.csv", "metrics.json", "structures.json", "split.json", "best.ckpt"] {
        let x = fs::read(a.path().join("run").join(f)).unwrap();
        let y = fs::read(b.path().join("run").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn rerun_from_run_config_reproduces_history() {
    let root = tempfile::tempdir().unwrap();
    pipeline(root.path());
    let run_dir = root.path().join("run");
    let again = root.path().join("again");
    let data = root.path().join("data");
    ok(&["train".into(), "--config".into(), s(&run_dir.join("run_config.json")), "--data".into(), s(&data), "--out".into(), s(&again)]);
    assert_eq!(
        fs::read(run_dir.join("history.csv")).unwrap(),
        fs::read(again.join("history.csv")).unwrap()
    );
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["fly"]), EXIT_USAGE);
    assert_eq!(run::<&str>(&[]), EXIT_USAGE);
    assert_eq!(run(&["train", "--out", "x"]), EXIT_USAGE);
    assert_eq!(run(&["gen", "--bogus", "1"]), EXIT_USAGE);
    assert_eq!(run(&["train", "--data", "d", "--out", "o", "--threads", "0"]), EXIT_USAGE);
}

#[test]
fn data_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    let bad = root.path().join("bad.json");
    fs::write(&bad, r#"{"sim": {"n_shops": 4, "colour": 1}}"#).unwrap();
    let f = execute(&["gen", "--config", &s(&bad), "--out", &s(&root.path().join("d"))]).unwrap_err();
    assert_eq!((f.code, f.kind.as_str()), (EXIT_DATA, "parse"));

    let missing = root.path().join("nothing");
    let f = execute(&["train", "--data", &s(&missing), "--out", &s(&root.path().join("o"))]).unwrap_err();
    assert_eq!(f.code, EXIT_DATA);

    let invalid = root.path().join("invalid.json");
    fs::write(&invalid, r#"{"train": {"tau": -1.0}}"#).unwrap();
    let f = execute(&["train", "--config", &s(&invalid), "--data", &s(&missing), "--out", &s(&root.path().join("o"))]).unwrap_err();
    assert_eq!((f.code, f.kind.as_str()), (EXIT_DATA, "contract"));
}

#[test]
fn divergence_exits_3() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), json!({"lr": 1e12, "epochs": 5}));
    let data = root.path().join("data");
    ok(&["gen".into(), "--config".into(), s(&cfg), "--out".into(), s(&data)]);
    let f = execute(&["train", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&root.path().join("run"))]).unwrap_err();
    assert_eq!((f.code, f.kind.as_str()), (EXIT_NUMERIC, "numeric"), "{}", f.line());
}

#[test]
fn binary_reports_one_error_line() {
    let out = Command::new(env!("CARGO_BIN_EXE_cmmm"))
        .args(["infer", "--ckpt", "/nonexistent/best.ckpt", "--data", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("ERROR io: "), "{err}");
    assert!(out.stdout.is_empty());
}
