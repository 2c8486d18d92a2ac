use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctxfront(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxfront"))
        .args(args)
        .env("CTXFRONT_THREADS", "1")
        .output()
        .expect("failed to launch ctxfront")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_RUN: &str = r#"{
  "simulation": {
    "train_per_condition": 1,
    "eval_per_condition": 1,
    "utterance_seconds": [0.5, 0.5],
    "context_seconds": 1.0
  },
  "arch": {
    "d_model": 16,
    "n_primary_blocks": 1,
    "n_context_blocks": 1,
    "n_cross_blocks": 1,
    "ffn_multiplier": 2,
    "n_heads": 2
  },
  "train": { "steps": 2, "batch_size": 2, "checkpoint_every": 1 }
}"#;

#[test]
fn unknown_subcommand_prints_usage_and_fails() {
    let out = ctxfront(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    let out = ctxfront(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));

    fs::write(&cfg, r#"{"train": {"batch_size": 0}}"#).unwrap();
    let out = ctxfront(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert!(stderr(&out).contains("batch_size"), "{}", stderr(&out));
}

#[test]
fn simulate_train_enhance_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.json");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let (train, eval) = (root.join("train"), root.join("eval"));

    let out = ctxfront(&["simulate", "--config", p(&cfg), "--out", p(&train)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("wrote 3 examples"));
    let out = ctxfront(&["simulate", "--config", p(&cfg), "--out", p(&eval), "--split", "eval"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let report = root.join("untrained.json");
    let out = ctxfront(&["eval", "--config", p(&cfg), "--data", p(&eval), "--report", p(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["conditions"].as_array().unwrap().len(), 3);
    assert_eq!(json["overall"]["n"], 3);

    let oracle = root.join("oracle.json");
    let out = ctxfront(&[
        "eval", "--oracle", "--alpha", "1", "--beta", "0", "--data", p(&eval), "--report", p(&oracle),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&oracle).unwrap()).unwrap();
    assert_eq!(json["overall"]["mask_mae"], 0.0);

    let ckpt = root.join("ckpt");
    let out = ctxfront(&[
        "train", "--config", p(&cfg), "--data", p(&train), "--out", p(&ckpt), "--held-out", p(&eval),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("held-out mask MAE"));
    for step in ["step-000000", "step-000001", "step-000002"] {
        assert!(ckpt.join(step).join("checkpoint.json").exists(), "{step}");
    }
    let log = fs::read_to_string(ckpt.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let enhanced = root.join("enhanced");
    let out = ctxfront(&[
        "enhance", "--ckpt", p(&ckpt.join("step-000002")), "--data", p(&eval), "--out", p(&enhanced),
        "--alpha", "0.5", "--beta", "0.01",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(enhanced.join("manifest.json")).unwrap()).unwrap();
    let first = &manifest["examples"][0]["tensors"];
    assert_eq!(first[3]["name"], "stacked");
    assert_eq!(first[3]["shape"][1], 512);
    let frames = first[2]["shape"][0].as_u64().unwrap();
    assert_eq!(first[3]["shape"][0].as_u64().unwrap(), frames.div_ceil(3));

    let out = ctxfront(&[
        "eval", "--ckpt", p(&ckpt.join("step-000002")), "--data", p(&eval), "--report", p(&root.join("trained.json")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn eval_rejects_invalid_policy() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxfront(&[
        "eval", "--oracle", "--beta", "3", "--data", p(dir.path()), "--report", p(&dir.path().join("r.json")),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("beta"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes() {
    let out = ctxfront(&["gradcheck"]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("gradient checks below"));
    assert!(!stdout(&out).contains("FAIL"));
}
