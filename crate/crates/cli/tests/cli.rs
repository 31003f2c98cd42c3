use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use danhar::checkpoint::load_checkpoint;
use danhar::model::is_attention_param;

fn danhar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_danhar"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = danhar(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<_> = stderr.lines().filter(|l| l.starts_with("danhar: error[")).collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    lines[0].to_string()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
  "data": {"source": "synthetic", "num_classes": 4, "per_class": 30, "axes": 3, "width": 32},
  "model": {"channel_plan": [8, 8, 16, 16]},
  "train": {"epochs": 4, "batch_size": 16}
}"#;

#[test]
fn prepare_synthetic_writes_archive_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["prepare", "--synthetic", "--seed", "5", "--out", "d"]);
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["num_windows"], 1000);
    assert_eq!(summary["dims"], serde_json::json!([3, 64]));
    assert!(dir.path().join("d/dataset.danhar").exists());
    let on_disk: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d/summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk, summary);
    let archive = danhar::data::load_archive(&dir.path().join("d/dataset.danhar")).unwrap();
    assert_eq!(archive.len(), 1000);
}

#[test]
fn prepare_csv_windows_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("subject,label,timestamp,x,y\n");
    for s in ["a", "b"] {
        for t in 0..50 {
            let label = if t < 25 { "walk" } else { "sit" };
            csv.push_str(&format!("{s},{label},{},{},{}\n", t as f64 * 0.05, t, -t));
        }
    }
    fs::write(dir.path().join("raw.csv"), csv).unwrap();
    let stdout = ok(dir.path(), &["prepare", "--input", "raw.csv", "--width", "20", "--step", "10", "--out", "d"]);
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["num_windows"], 8);
    assert_eq!(summary["dims"], serde_json::json!([2, 20]));
}

#[test]
fn failures_exit_nonzero_with_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = danhar(dir.path(), &["prepare", "--input", "nope.csv", "--width", "4", "--step", "2"]);
    assert!(error_line(&missing).starts_with("danhar: error[io]:"));

    let bad_flag = danhar(dir.path(), &["train", "--attention", "sideways"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    assert!(error_line(&bad_flag).starts_with("danhar: error[usage]:"));

    let cfg = write_config(dir.path(), "bad.json", r#"{"trian": {}}"#);
    let bad_cfg = danhar(dir.path(), &["--config", &cfg, "train"]);
    assert_eq!(bad_cfg.status.code(), Some(2));
    assert!(error_line(&bad_cfg).starts_with("danhar: error[config]:"));

    let threads = Command::new(env!("CARGO_BIN_EXE_danhar"))
        .current_dir(dir.path())
        .args(["prepare", "--synthetic"])
        .env("DANHAR_THREADS", "many")
        .output()
        .unwrap();
    assert!(error_line(&threads).starts_with("danhar: error[config]:"));
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    for out in ["a", "b"] {
        ok(dir.path(), &["--config", &cfg, "--seed", "9", "--out", out, "train"]);
    }
    for f in ["config.json", "history.csv", "final.ckpt", "best.ckpt", "metrics.json", "normalization.json"] {
        assert!(dir.path().join("a").join(f).exists(), "missing {f}");
    }
    let history = fs::read_to_string(dir.path().join("a/history.csv")).unwrap();
    assert!(history.starts_with("epoch,lr,train_loss,val_loss,val_acc\n"));
    assert_eq!(history.lines().count(), 5);
    for f in ["history.csv", "final.ckpt", "best.ckpt", "metrics.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/metrics.json")).unwrap()).unwrap();
    assert!(metrics["best"]["accuracy"].as_f64().unwrap() >= metrics["final"]["accuracy"].as_f64().unwrap());

    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 9);
    assert_eq!(config["train"]["epochs"], 4);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    ok(dir.path(), &["--config", &cfg, "--out", "r", "train", "--epochs", "1", "--lr", "0.01", "--backbone", "plain"]);
    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["epochs"], 1);
    assert_eq!(config["train"]["base_lr"], 0.01);
    assert_eq!(config["model"]["backbone"], "plain");
    let history = fs::read_to_string(dir.path().join("r/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn attention_variants_differ_only_in_attention_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    ok(dir.path(), &["--config", &cfg, "--out", "none", "train", "--epochs", "1", "--attention", "none"]);
    ok(dir.path(), &["--config", &cfg, "--out", "dual", "train", "--epochs", "1", "--attention", "channel_then_temporal"]);
    let none = load_checkpoint(&dir.path().join("none/final.ckpt")).unwrap().state();
    let dual = load_checkpoint(&dir.path().join("dual/final.ckpt")).unwrap().state();
    let shapes = |s: &[(String, danhar::Tensor)], keep_attention: bool| -> Vec<(String, Vec<usize>)> {
        s.iter()
            .filter(|(n, _)| is_attention_param(n) == keep_attention)
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    };
    assert_eq!(shapes(&none, false), shapes(&dual, false));
    assert!(shapes(&none, true).is_empty());
    assert!(!shapes(&dual, true).is_empty());
}

#[test]
fn evaluate_with_archive_and_normalization_matches_train_metrics() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["prepare", "--synthetic", "--per-class", "30", "--out", "d"]);
    let body = r#"{
      "data": {"source": "archive", "path": "d/dataset.danhar"},
      "split": {"kind": "random", "fraction": 0.75, "seed": 0},
      "model": {"channel_plan": [8, 8]},
      "train": {"epochs": 2, "batch_size": 16},
      "out": "run"
    }"#;
    let cfg = write_config(dir.path(), "cfg.json", body);
    ok(dir.path(), &["--config", &cfg, "train"]);
    let via_config: serde_json::Value = serde_json::from_str(&ok(dir.path(), &["--config", &cfg, "evaluate"])).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(via_config, metrics["best"]);

    let whole: serde_json::Value = serde_json::from_str(&ok(
        dir.path(),
        &[
            "evaluate",
            "--checkpoint",
            "run/best.ckpt",
            "--data",
            "d/dataset.danhar",
            "--normalization",
            "run/normalization.json",
        ],
    ))
    .unwrap();
    let total: u64 = whole["confusion"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 120);
}

#[test]
fn ablate_writes_rows_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{
      "data": {"source": "synthetic", "num_classes": 3, "per_class": 12, "axes": 2, "width": 16},
      "model": {"channel_plan": [8, 8]},
      "train": {"epochs": 1, "batch_size": 8},
      "ablation_seeds": [0, 1],
      "out": "abl"
    }"#;
    let cfg = write_config(dir.path(), "cfg.json", body);
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_danhar"))
            .current_dir(dir.path())
            .args(["--config", &cfg, "ablate"])
            .env("DANHAR_THREADS", threads)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap()
    };
    let serial = run("1");
    assert_eq!(run("3"), serial);

    let mut reader = csv::Reader::from_reader(serial.as_bytes());
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["seed", "variant", "params", "final_acc", "best_acc"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 15);
    assert_eq!(rows.iter().filter(|r| &r[0] == "mean").count(), 5);
    let params = |variant: &str| -> usize {
        rows.iter().find(|r| &r[0] == "0" && &r[1] == variant).unwrap()[2].parse().unwrap()
    };
    let none = params("none");
    let (c, t) = (params("channel_only"), params("temporal_only"));
    let (ct, tc) = (params("channel_then_temporal"), params("temporal_then_channel"));
    assert!(none < c && none < t);
    assert!(c < ct && t < ct);
    assert_eq!(ct, tc);
    assert_eq!(ct - none, (c - none) + (t - none));
    for r in &rows {
        let acc: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn export_attention_writes_bounded_deterministic_weights() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["prepare", "--synthetic", "--per-class", "20", "--mode", "segment", "--out", "d"]);
    let body = r#"{
      "data": {"source": "archive", "path": "d/dataset.danhar"},
      "model": {"channel_plan": [8, 8, 16, 16], "attention": {"variant": "channel_then_temporal"}},
      "train": {"epochs": 1, "batch_size": 16},
      "out": "run"
    }"#;
    let cfg = write_config(dir.path(), "cfg.json", body);
    ok(dir.path(), &["--config", &cfg, "train"]);
    let export = |out: &str| {
        ok(
            dir.path(),
            &[
                "--out",
                out,
                "export-attention",
                "--checkpoint",
                "run/best.ckpt",
                "--data",
                "d/dataset.danhar",
                "--normalization",
                "run/normalization.json",
                "--windows",
                "0,7",
            ],
        )
    };
    export("x1");
    export("x2");
    for i in [0, 7] {
        for kind in ["temporal", "channel"] {
            let name = format!("{kind}_{i}.csv");
            let a = fs::read_to_string(dir.path().join("x1").join(&name)).unwrap();
            assert_eq!(a, fs::read_to_string(dir.path().join("x2").join(&name)).unwrap());
            let mut reader = csv::Reader::from_reader(a.as_bytes());
            let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
            let expected: &[&str] = if kind == "temporal" { &["layer", "h", "w", "weight"] } else { &["layer", "channel", "weight"] };
            assert_eq!(header, expected);
            let mut layers = std::collections::BTreeSet::new();
            for rec in reader.records() {
                let rec = rec.unwrap();
                layers.insert(rec[0].to_string());
                let w: f64 = rec[rec.len() - 1].parse().unwrap();
                assert!(w > 0.0 && w < 1.0, "{name}: weight {w}");
            }
            assert_eq!(layers.len(), 2, "{name}");
        }
    }
    let temporal = fs::read_to_string(dir.path().join("x1/temporal_0.csv")).unwrap();
    // first block sees the full 64 steps on 3 axes, second block half of that
    assert_eq!(temporal.lines().count(), 1 + 3 * 64 + 3 * 32);

    let oob = danhar(
        dir.path(),
        &["export-attention", "--checkpoint", "run/best.ckpt", "--data", "d/dataset.danhar", "--windows", "999"],
    );
    assert!(error_line(&oob).starts_with("danhar: error[index]:"));
}
