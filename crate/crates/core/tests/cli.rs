//! The command-line front end, run as a child process.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deformsynth"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn demo_assets(dir: &Path) -> String {
    let assets = dir.join("assets");
    let a = assets.to_str().unwrap();
    let o = run(&[
        "demo-assets",
        "--out",
        a,
        "--objects",
        "2",
        "--backgrounds",
        "2",
        "--occluders",
        "1",
        "--width",
        "160",
        "--height",
        "120",
    ]);
    stdout_json(&o);
    a.to_string()
}

fn write_config(dir: &Path, doc: Value) -> String {
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let assets = demo_assets(dir.path());
    let cfg = write_config(dir.path(), json!({"render": {"image_size": [160, 120]}}));
    let out = dir.path().join("gen");
    let o = run(&[
        "gen",
        "--config",
        &cfg,
        "--assets",
        &assets,
        "--out",
        out.to_str().unwrap(),
        "--condition",
        "mb",
        "--difficulty",
        "hard",
        "--count",
        "3",
        "--seed",
        "4",
    ]);
    let v = stdout_json(&o);
    assert_eq!(v["samples"], 6);
    let m = deformsynth::dataset::read_manifest(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(m.len(), 6);
    m.verify_images().unwrap();
    assert!(m
        .records
        .iter()
        .all(|r| r.theta.condition() == deformsynth::conditions::Condition::MotionBlur));
}

#[test]
fn bad_arguments_exit_with_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["gen", "--out", out, "--condition", "xx", "--count", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("xx"), "{err}");
    assert!(o.stdout.is_empty());

    let o = run(&["gen", "--out", out, "--condition", "fb", "--count", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "gen",
        "--out",
        out,
        "--condition",
        "fb",
        "--difficulty",
        "canonical",
        "--count",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_assets_fail_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "gen",
        "--assets",
        dir.path().join("none").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--condition",
        "fb",
        "--count",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert!(o.stdout.is_empty());
}

#[test]
fn eval_scores_a_detection_file() {
    let dir = tempfile::tempdir().unwrap();
    let assets = demo_assets(dir.path());
    let out = dir.path().join("gen");
    let cfg = write_config(dir.path(), json!({"render": {"image_size": [160, 120]}}));
    stdout_json(&run(&[
        "gen",
        "--config",
        &cfg,
        "--assets",
        &assets,
        "--out",
        out.to_str().unwrap(),
        "--condition",
        "sc",
        "--count",
        "2",
    ]));
    let manifest = out.join("manifest.jsonl");
    let m = deformsynth::dataset::read_manifest(&manifest).unwrap();

    // perfect detections as JSON lines
    let lines: Vec<String> = m
        .ground_truth()
        .iter()
        .map(|g| json!({"image_id": g.image_id, "class_id": g.class_id, "box": g.bbox, "score": 0.9}).to_string())
        .collect();
    let perfect = dir.path().join("perfect.jsonl");
    fs::write(&perfect, lines.join("\n")).unwrap();
    let v = stdout_json(&run(&[
        "eval",
        "--detections",
        perfect.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]));
    assert_eq!(v["map"], 1.0);

    let empty = dir.path().join("empty.json");
    fs::write(&empty, "[]").unwrap();
    let v = stdout_json(&run(&[
        "eval",
        "--detections",
        empty.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]));
    assert_eq!(v["map"], 0.0);

    let o = run(&[
        "eval",
        "--detections",
        empty.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--iou",
        "1.5",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn active_learn_with_mock_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let assets = demo_assets(dir.path());
    fs::write(dir.path().join("script.json"), r#"{"default_map": 0.5}"#).unwrap();
    let cfg = write_config(
        dir.path(),
        json!({
            "assets": {"root": assets},
            "out": "run",
            "detector": "mock:script.json",
            "render": {"image_size": [160, 120], "grid": [6, 8]},
            "active_learning": {"conditions": ["fb", "li"], "m": 1, "n": 1, "objects": [1]}
        }),
    );
    let v = stdout_json(&run(&["active-learn", "--config", &cfg, "--difficulty", "easy"]));
    assert_eq!(v["increments"], 22);
    let blocks = v["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 2);
    assert!(blocks.iter().all(|b| b["increments"] == 11));
    assert_eq!(v["final_model"]["model_id"], "li-easy-k001");
    let log = dir.path().join("run/runlog.jsonl");
    assert!(log.exists());

    // cut the log back to the middle of the second block and resume
    let text = fs::read_to_string(&log).unwrap();
    let kept: Vec<&str> = text.lines().take(11 + 1 + 4).collect();
    fs::write(&log, kept.join("\n") + "\n").unwrap();
    let v = stdout_json(&run(&[
        "active-learn",
        "--config",
        &cfg,
        "--difficulty",
        "easy",
        "--resume",
    ]));
    assert_eq!(v["increments"], 22);
    let after = fs::read_to_string(&log).unwrap();
    assert_eq!(after.lines().count(), text.lines().count());
    assert_eq!(after.lines().take(16).collect::<Vec<_>>(), kept);
}

#[test]
fn learnability_command_reports_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let assets = demo_assets(dir.path());
    fs::write(dir.path().join("script.json"), r#"{"default_map": 1.0}"#).unwrap();
    let cfg = write_config(
        dir.path(),
        json!({
            "assets": {"root": assets},
            "out": "run",
            "detector": "mock:script.json",
            "render": {"image_size": [160, 120], "grid": [6, 8]},
            "learnability": {"kappa": 2, "m": 2, "n_test": 2}
        }),
    );
    let v = stdout_json(&run(&["learnability", "--config", &cfg, "--condition", "eo"]));
    assert_eq!(v["scores"], json!([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]));
    let o = run(&["learnability", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn standard_testset_command_counts_records() {
    let dir = tempfile::tempdir().unwrap();
    let assets = demo_assets(dir.path());
    let cfg = write_config(
        dir.path(),
        json!({
            "render": {"image_size": [160, 120], "grid": [6, 8]},
            "active_learning": {"conditions": ["sc"], "n": 2, "objects": [0]}
        }),
    );
    let out = dir.path().join("st");
    let v = stdout_json(&run(&[
        "standard-testset",
        "--config",
        &cfg,
        "--assets",
        &assets,
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(v["samples"], 6);
}
