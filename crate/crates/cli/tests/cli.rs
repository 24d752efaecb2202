use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn kws(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kws"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("kws runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = kws(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    if text.trim().is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).unwrap()
    }
}

fn write_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "seed": 3,
        "cache": "cache.kwsc",
        "out_dir": "runs",
        "supernet": {
            "unit_max_depths": [1, 1],
            "max_width": 8,
            "max_kernel": 3,
            "kernel_choices": [1, 3],
            "width_choices": [4, 8],
            "n_classes": 3
        },
        "train": {"epochs": [1, 1, 1, 1], "batch_size": 8},
        "search": {"population": 4, "generations": 1, "eval_samples": 16, "calib_batches": 1, "calib_batch_size": 8},
        "constraint": {"max_weight_bytes": 100000},
        "qat": {"epochs": 2, "qat_start": 1, "halve_start": 1, "halve_every": 1, "halvings": 1, "batch_size": 8}
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_pipeline_on_synthetic_clips() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d);
    let c = ["--config", "run.json"];
    let with = |extra: &[&'static str]| -> Vec<&str> {
        c.iter().copied().chain(extra.iter().copied()).collect()
    };

    let prep = ok(d, &with(&["prepare", "--synthetic", "3", "12"]));
    assert_eq!(prep["records"], 36);
    assert!(d.join("cache.kwsc.index.json").exists());

    ok(d, &with(&["train-supernet"]));
    assert!(d.join("runs/supernet.ofa").exists());
    let log = std::fs::read_to_string(d.join("runs/supernet.ofa.csv")).unwrap();
    let stages: Vec<&str> = log
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(
        stages,
        ["full", "elastic_kernel", "elastic_depth", "elastic_width"]
    );

    ok(d, &with(&["search", "--ckpt", "runs/supernet.ofa"]));
    let report: Value =
        serde_json::from_slice(&std::fs::read(d.join("runs/search.json")).unwrap()).unwrap();
    assert!(report["best"]["spec"].is_object());
    let history = std::fs::read_to_string(d.join("runs/search.json.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let summary = ok(
        d,
        &with(&[
            "qat",
            "--ckpt",
            "runs/supernet.ofa",
            "--spec",
            "runs/search.json",
        ]),
    );
    assert!(summary["params"].as_u64().unwrap() > 0);
    assert!(d.join("runs/model.kwsq").exists());

    let eval = ok(
        d,
        &with(&["eval", "--model", "runs/model.kwsq", "--split", "train"]),
    );
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(
        d,
        &["export", "--model", "runs/model.kwsq", "--out", "copy.kwsq"],
    );
    assert_eq!(
        std::fs::read(d.join("copy.kwsq")).unwrap(),
        std::fs::read(d.join("runs/model.kwsq")).unwrap()
    );
    ok(
        d,
        &[
            "export",
            "--model",
            "runs/model.kwsq",
            "--out",
            "model.json",
            "--format",
            "json",
        ],
    );
    let j: Value = serde_json::from_slice(&std::fs::read(d.join("model.json")).unwrap()).unwrap();
    assert!(j["layers"].as_array().unwrap().len() >= 3);

    let cost = ok(d, &with(&["cost", "--spec", "runs/search.json"]));
    assert!(cost["total_macs"].as_u64().unwrap() > 0);
    assert!(cost["violations"].as_array().unwrap().is_empty());
}

#[test]
fn cost_of_the_default_supernet() {
    let tmp = tempfile::tempdir().unwrap();
    let r = ok(tmp.path(), &["cost"]);
    assert_eq!(r["param_count"], 1_153_804);
    assert_eq!(r["mfcc"]["frames"], 49);
}

#[test]
fn mfcc_writes_one_row_per_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let wav = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mfcc_input.wav");
    ok(
        tmp.path(),
        &["mfcc", "--wav", wav.to_str().unwrap(), "--out", "f.csv"],
    );
    let text = std::fs::read_to_string(tmp.path().join("f.csv")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 49);
    assert!(rows.iter().all(|r| r.split(',').count() == 40));
}

#[test]
fn usage_errors_exit_with_status_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(kws(d, &["train-supernet"]).status.code(), Some(2));
    std::fs::write(d.join("bad.json"), r#"{"seed": 1, "sede": 2}"#).unwrap();
    assert_eq!(
        kws(d, &["--config", "bad.json", "cost"]).status.code(),
        Some(2)
    );
    assert_eq!(
        kws(d, &["--seed", "1", "search", "--ckpt", "missing.ofa"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        kws(d, &["--seed", "1", "train-supernet"]).status.code(),
        Some(2)
    );
    assert_eq!(
        kws(d, &["export", "--model", "nope.kwsq", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn corrupt_model_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("junk.kwsq"), b"KWSQ0001garbage").unwrap();
    let out = kws(
        tmp.path(),
        &["export", "--model", "junk.kwsq", "--out", "x"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
