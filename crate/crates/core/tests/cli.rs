use std::path::Path;
use std::process::{Command, Output};

use trajmoe::vocab::{build_vocabulary, sample_trajectories, KinematicParams};

const SMALL: &str = "\
world.count = 12
vocab.k = 8
vocab.samples = 200
vocab.iters = 10
model.dim = 16
model.heads = 2
model.experts = 4
model.top_k = 2
model.expert_hidden = 16
train.epochs = 1
train.batch = 4
grpo.iterations = 3
grpo.minibatch = 4
";

fn trajmoe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajmoe"))
        .current_dir(dir)
        .env_remove("TRAJMOE_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = trajmoe(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

#[test]
fn gen_data_is_byte_identical() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gen-data", "--config", "small.cfg", "--out", "a.jsonl"]);
    ok(d, &["gen-data", "--config", "small.cfg", "--out", "b.jsonl"]);
    assert_eq!(read(d, "a.jsonl"), read(d, "b.jsonl"));
    assert_eq!(String::from_utf8(read(d, "a.jsonl")).unwrap().lines().count(), 12);
    assert_eq!(read(d, "a.jsonl.resolved.cfg"), read(d, "b.jsonl.resolved.cfg"));
    ok(d, &["gen-data", "--count", "0", "--out", "empty.jsonl"]);
    assert!(read(d, "empty.jsonl").is_empty());
    ok(d, &["gen-data", "--config", "small.cfg", "--seed", "9", "--out", "c.jsonl"]);
    assert_ne!(read(d, "a.jsonl"), read(d, "c.jsonl"));
}

#[test]
fn full_pipeline_runs_and_reproduces() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gen-data", "--config", "small.cfg", "--out", "data.jsonl"]);
    ok(d, &["build-vocab", "--config", "small.cfg", "--out", "vocab.json"]);
    for run in ["a", "b"] {
        let ck = format!("{run}.ck.json");
        ok(d, &["train", "--config", "small.cfg", "--data", "data.jsonl", "--vocab", "vocab.json", "--out", &ck]);
        let report = format!("{run}.report.txt");
        ok(d, &["eval", "--config", "small.cfg", "--checkpoint", &ck, "--data", "data.jsonl", "--report", &report]);
    }
    assert_eq!(read(d, "a.ck.json"), read(d, "b.ck.json"));
    assert_eq!(read(d, "a.ck.json.log.csv"), read(d, "b.ck.json.log.csv"));
    assert_eq!(read(d, "a.report.txt"), read(d, "b.report.txt"));

    ok(d, &["grpo-finetune", "--config", "small.cfg", "--checkpoint", "a.ck.json", "--data", "data.jsonl", "--out", "g.ck.json"]);
    let log = String::from_utf8(read(d, "g.ck.json.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    // a GRPO checkpoint cannot be fine-tuned again
    let again = trajmoe(d, &["grpo-finetune", "--checkpoint", "g.ck.json", "--data", "data.jsonl", "--out", "x.json"]);
    assert_eq!(again.status.code(), Some(1));

    std::fs::write(
        d.join("ens.json"),
        r#"{"members": [{"checkpoint": "a.ck.json", "weight": 1.0}, {"checkpoint": "g.ck.json", "weight": 2.0}]}"#,
    )
    .unwrap();
    ok(d, &["eval", "--ensemble", "ens.json", "--data", "data.jsonl", "--report", "ens.txt"]);
    ok(d, &["ensemble", "--spec", "ens.json", "--data", "data.jsonl", "--out", "plans.jsonl"]);
    assert_eq!(String::from_utf8(read(d, "plans.jsonl")).unwrap().lines().count(), 12);
}

#[test]
fn seed_variable_overrides_config() {
    let dir = setup();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_trajmoe"))
        .current_dir(d)
        .env("TRAJMOE_SEED", "41")
        .args(["gen-data", "--config", "small.cfg", "--out", "a.jsonl"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = String::from_utf8(read(d, "a.jsonl.resolved.cfg")).unwrap();
    for key in ["model.seed = 41", "train.seed = 41", "grpo.seed = 41"] {
        assert!(cfg.contains(key), "{cfg}");
    }
    let bad = Command::new(env!("CARGO_BIN_EXE_trajmoe"))
        .current_dir(d)
        .env("TRAJMOE_SEED", "minus one")
        .args(["gen-data", "--out", "b.jsonl"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "model.dim = x\nnope = 1\n").unwrap();
    let out = trajmoe(d, &["gen-data", "--config", "bad.cfg", "--out", "a.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.dim") && err.contains("nope"), "{err}");

    assert_eq!(trajmoe(d, &["gen-data", "--config", "missing.cfg", "--out", "a.jsonl"]).status.code(), Some(2));
    assert_eq!(trajmoe(d, &["gen-data", "--out", "no/such/dir/a.jsonl"]).status.code(), Some(2));
    assert_eq!(trajmoe(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(trajmoe(d, &["eval", "--data", "x", "--report", "y"]).status.code(), Some(1));

    std::fs::write(d.join("garbage.json"), "{not json").unwrap();
    ok(d, &["gen-data", "--config", "small.cfg", "--out", "data.jsonl"]);
    let out = trajmoe(d, &["eval", "--checkpoint", "garbage.json", "--data", "data.jsonl", "--report", "r.txt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn vocabulary_horizon_must_match_model() {
    let dir = setup();
    let d = dir.path();
    let params = KinematicParams {
        horizon: 4,
        ..KinematicParams::default()
    };
    let trajs = sample_trajectories(1, 100, &params).unwrap();
    let vocab = build_vocabulary(&trajs, 4, 5, 1, params.dt).unwrap();
    std::fs::write(d.join("short.json"), vocab.to_json_string()).unwrap();
    ok(d, &["gen-data", "--config", "small.cfg", "--out", "data.jsonl"]);
    let out = trajmoe(d, &["train", "--config", "small.cfg", "--data", "data.jsonl", "--vocab", "short.json", "--out", "ck.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("ck.json").exists());
}

#[test]
fn gradcheck_command_passes_on_small_model() {
    let dir = setup();
    ok(dir.path(), &["gradcheck", "--config", "small.cfg", "--anchors", "2"]);
}
