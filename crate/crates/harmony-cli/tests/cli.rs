//! End-to-end smoke tests of the command-line interface with a reduced
//! configuration: benchmark generation, both training stages, seed search,
//! editing, and evaluation, chained through real files.

use std::path::Path;
use std::process::Command;

fn harmony() -> Command {
    Command::new(env!("CARGO_BIN_EXE_harmony"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "hidden=6,8,10,12\nattn_dim=8\ntime_dim=8\nd_v=16\nd_t=8\npatch=8\nheads=2\n\
         full_steps=4\nshallow_steps=2\npool_size=6\ntop_k=2\nguidance=1.5\n",
    )
    .unwrap();
    path
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_tiny_config(root);
    let bench = root.join("bench");
    let base_ckpt = root.join("base.ckpt");
    let full_ckpt = root.join("full.ckpt");

    // bench
    let out = harmony()
        .args(["bench", "--seed", "1", "--out"])
        .arg(&bench)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(bench.join("manifest.jsonl").exists());
    assert!(bench.join("images/scene_000.png").exists());
    assert!(bench.join("run.json").exists());
    let manifest = std::fs::read_to_string(bench.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 200);

    // pretrain (tiny) with periodic checkpoints
    let out = harmony()
        .args(["pretrain", "--seed", "3", "--train-steps", "40", "--corpus-size", "24"])
        .args(["--save-every", "20", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&base_ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(base_ckpt.exists());
    assert!(root.join("base.losses.jsonl").exists());
    assert!(root.join("base.step20.ckpt").exists());
    assert!(root.join("base.step40.ckpt").exists());

    // adapter training
    let out = harmony()
        .args(["train", "--variant", "full", "--seed", "4", "--train-steps", "25"])
        .args(["--corpus-size", "24", "--ckpt"])
        .arg(&base_ckpt)
        .args(["--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&full_ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(full_ckpt.exists());

    // seed search into a pool store
    let pools = root.join("pools.jsonl");
    let out = harmony()
        .args(["seed-search", "--caption", "one circle", "--ckpt"])
        .arg(&full_ckpt)
        .args(["--pools"])
        .arg(&pools)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pools.exists());

    // edit with a fixed seed (bypasses pools)
    let edit_out = root.join("edit");
    let out = harmony()
        .args(["edit", "--prompt", "one square", "--seed", "5", "--image"])
        .arg(bench.join("images/scene_000.png"))
        .args(["--ckpt"])
        .arg(&full_ckpt)
        .args(["--out"])
        .arg(&edit_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(edit_out.join("edited.png").exists());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(edit_out.join("edited.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["selected_seed"], 5);
    assert!(sidecar["alpha"].is_number() && sidecar["beta"].is_number());

    // eval over a thin slice
    let eval_out = root.join("eval");
    let out = harmony()
        .args(["eval", "--max-count", "1", "--max-edits", "2", "--kinds", "class"])
        .args(["--bench"])
        .arg(&bench)
        .args(["--ckpt"])
        .arg(&full_ckpt)
        .args(["--out"])
        .arg(&eval_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval_out.join("records.jsonl").exists());
    assert!(eval_out.join("summary.txt").exists());
    let summary = std::fs::read_to_string(eval_out.join("summary.txt")).unwrap();
    assert!(summary.contains("OCA"));
}

#[test]
fn unknown_subcommand_fails_with_usage() {
    let out = harmony().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage") || stderr.contains("usage"));
}

#[test]
fn eval_on_missing_benchmark_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = harmony()
        .args(["eval", "--bench"])
        .arg(dir.path().join("missing"))
        .args(["--ckpt", "/nonexistent.ckpt", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn missing_checkpoint_env_fallback_message() {
    let out = harmony()
        .args(["seed-search", "--caption", "one circle", "--pools", "/tmp/x.jsonl"])
        .env_remove("HARMONY_CKPT")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("HARMONY_CKPT"));
}
