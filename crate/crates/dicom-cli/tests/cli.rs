//! End-to-end runs of the `dicom` binary: the full synthesize → pre-train →
//! evaluate chain, resume identity, and the error-reporting contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dicom"))
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{
            "data": {"image_size": [16, 16], "batch_size": 4},
            "model": {"patch_size": 8, "embed_dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2},
            "head": {"K": 8, "bottleneck": 8, "hidden": 16},
            "temp": {"warmup_epochs": 1},
            "optim": {"warmup_epochs": 1},
            "ema": {"start": 0.99, "end": 1.0},
            "train": {"epochs": 2, "checkpoint_every": 1},
            "probe": {"epochs": 3},
            "finetune": {"epochs": 1},
            "segment": {"epochs": 1, "channels": [8, 8, 4], "classes": 2}
        }"#,
    )
    .unwrap();
    path
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join("data");
    let out = bin()
        .args(["gen-synth", "--classes", "2", "--per-class", "8", "--size", "16x16"])
        .args(["--seed", &seed.to_string(), "--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    let manifest = PathBuf::from(ok(&out));
    assert!(manifest.exists());
    assert!(data.join("generator.json").exists());
    manifest
}

#[test]
fn synthesize_pretrain_and_evaluate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 3);
    let config = tiny_config(dir.path());
    let run = dir.path().join("run");

    let out = bin()
        .args(["pretrain", "--config", config.to_str().unwrap()])
        .args(["--data", manifest.to_str().unwrap(), "--out", run.to_str().unwrap()])
        .output()
        .unwrap();
    let final_ckpt = PathBuf::from(ok(&out));
    assert!(final_ckpt.join("manifest.json").exists());
    assert!(run.join("losses.csv").exists());
    let snapshot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert!(snapshot["version"].is_string());
    assert_eq!(snapshot["config"]["model"]["embed_dim"], 16);

    let probe = dir.path().join("probe.json");
    let out = bin()
        .args(["probe", "--ckpt", final_ckpt.to_str().unwrap()])
        .args(["--data", manifest.to_str().unwrap(), "--out", probe.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&probe).unwrap()).unwrap();
    assert_eq!(report["task"], "linear_probe");
    assert!(report["final"]["accuracy"].is_number());
    assert!(dir.path().join("probe.config.json").exists());

    let curve = dir.path().join("probe.curve.csv");
    assert!(curve.exists());
    let out = bin()
        .args(["soc", "--curve", curve.to_str().unwrap(), "--column", "AUPR"])
        .output()
        .unwrap();
    let soc: serde_json::Value = serde_json::from_str(&ok(&out)).unwrap();
    let score = soc["soc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score), "soc {score}");
    assert_eq!(soc["epochs"], 3);

    let cluster = dir.path().join("cluster.json");
    let out = bin()
        .args(["cluster-eval", "--ckpt", final_ckpt.to_str().unwrap()])
        .args(["--data", manifest.to_str().unwrap(), "--out", cluster.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cluster).unwrap()).unwrap();
    assert_eq!(report["task"], "cluster_eval");
    let emb = std::fs::read_to_string(dir.path().join("cluster.embeddings.csv")).unwrap();
    assert!(emb.starts_with("id,label,e_0"));
}

#[test]
fn segmentation_subcommand_writes_report_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 5);
    let config = tiny_config(dir.path());
    let run = dir.path().join("run");

    let out = bin()
        .args(["pretrain", "--config", config.to_str().unwrap()])
        .args(["--data", manifest.to_str().unwrap(), "--out", run.to_str().unwrap()])
        .output()
        .unwrap();
    let final_ckpt = PathBuf::from(ok(&out));

    let seg = dir.path().join("seg.json");
    let out = bin()
        .args(["segment", "--ckpt", final_ckpt.to_str().unwrap()])
        .args(["--data", manifest.to_str().unwrap(), "--out", seg.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&seg).unwrap()).unwrap();
    assert_eq!(report["task"], "segmentation");
    assert_eq!(report["final"]["dice"].as_array().unwrap().len(), 2);
    let curve = std::fs::read_to_string(dir.path().join("seg.curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,train_loss,mean_dice"));
}

#[test]
fn resume_matches_the_uninterrupted_run_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 7);
    let config = tiny_config(dir.path());
    let full = dir.path().join("full");
    let resumed = dir.path().join("resumed");

    let out = bin()
        .args(["pretrain", "--config", config.to_str().unwrap()])
        .args(["--data", manifest.to_str().unwrap(), "--out", full.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&out);

    let out = bin()
        .args(["pretrain", "--data", manifest.to_str().unwrap()])
        .args(["--resume", full.join("checkpoint-0001").to_str().unwrap()])
        .args(["--out", resumed.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&out);

    let a = std::fs::read(full.join("checkpoint-final/tensors.bin")).unwrap();
    let b = std::fs::read(resumed.join("checkpoint-final/tensors.bin")).unwrap();
    assert_eq!(a, b, "resumed run diverged from the uninterrupted one");
}

#[test]
fn conflicting_config_on_resume_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 9);
    let config = tiny_config(dir.path());
    let run = dir.path().join("run");

    let out = bin()
        .args(["pretrain", "--config", config.to_str().unwrap()])
        .args(["--data", manifest.to_str().unwrap(), "--out", run.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&out);

    // Same settings except the seed: a different resolved configuration.
    let other_config = dir.path().join("other.json");
    let mut text = std::fs::read_to_string(&config).unwrap();
    text.insert_str(text.find('{').unwrap() + 1, "\n            \"seed\": 42,");
    std::fs::write(&other_config, text).unwrap();
    let out = bin()
        .args(["pretrain", "--config", other_config.to_str().unwrap()])
        .args(["--data", manifest.to_str().unwrap()])
        .args(["--resume", run.join("checkpoint-0001").to_str().unwrap()])
        .args(["--out", dir.path().join("other").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let record: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(record["code"], "config/invalid");
}

#[test]
fn failures_emit_machine_readable_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["probe", "--ckpt", dir.path().join("missing").to_str().unwrap()])
        .args(["--data", dir.path().join("nope.csv").to_str().unwrap()])
        .args(["--out", dir.path().join("r.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let record: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(record["code"].is_string());
    assert!(record["message"].is_string());
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage") || err.contains("usage"), "{err}");
}

#[test]
fn soc_reproduces_the_hand_computed_trapezoid() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    std::fs::write(&curve, "epoch,aupr\n1,0\n2,1\n3,1\n").unwrap();
    let out = bin()
        .args(["soc", "--curve", curve.to_str().unwrap(), "--column", "AUPR"])
        .output()
        .unwrap();
    let report: serde_json::Value = serde_json::from_str(&ok(&out)).unwrap();
    assert!((report["soc"].as_f64().unwrap() - 0.75).abs() < 1e-12);
}
