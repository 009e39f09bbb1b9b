//! Worker protocol: a scripted conformance session that any worker command
//! can be replayed against (set `DEFORMSYNTH_WORKER` to test another
//! implementation), plus the bridge's handling of misbehaving workers.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use deformsynth::conditions::{canonical_params, generate_parameters, Condition, Difficulty};
use deformsynth::dataset::{generate_data, GenerateSpec, RenderSettings, Split};
use deformsynth::detector::{Detector, DetectorKind, DetectorSpec, ExternalDetector, TrainRequest, TrainStep};
use deformsynth::procedural::ProceduralAssets;
use deformsynth::raster::BBox;
use deformsynth::Error;
use serde_json::{json, Value};

const WORKER: &str = env!("CARGO_BIN_EXE_deformsynth");

fn worker_command(models: &Path) -> String {
    std::env::var("DEFORMSYNTH_WORKER")
        .unwrap_or_else(|_| format!("'{WORKER}' serve-worker --models '{}'", models.display()))
}

/// Writes a small train and test set; returns their manifest paths.
fn datasets(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let size = (192, 144);
    let reg = ProceduralAssets {
        objects: 2,
        backgrounds: 2,
        occluders: 1,
        image_size: size,
        ..ProceduralAssets::default()
    }
    .registry(21);
    let settings = RenderSettings {
        image_size: size,
        ..RenderSettings::default()
    };
    let mut train = generate_parameters(Condition::Scale, Difficulty::Easy, 2, 1).unwrap();
    train.push(canonical_params(Condition::Scale));
    let tr = generate_data(
        &train,
        &[0, 1],
        &reg,
        &dir.join("train"),
        2,
        &settings,
        &GenerateSpec::default(),
    )
    .unwrap();
    assert_eq!(tr.len(), 6);
    let test = vec![canonical_params(Condition::Scale); 2];
    let spec = GenerateSpec {
        split: Split::Test,
        ..GenerateSpec::default()
    };
    generate_data(&test, &[0, 1], &reg, &dir.join("test"), 3, &settings, &spec).unwrap();
    (dir.join("train/manifest.jsonl"), dir.join("test/manifest.jsonl"))
}

fn is_object_with(v: &Value, keys: &[&str]) -> bool {
    v.as_object().is_some_and(|o| keys.iter().all(|k| o.contains_key(*k)))
}

#[test]
fn scripted_session_conformance() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = datasets(dir.path());
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(worker_command(&dir.path().join("models")))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut send = |req: &str| -> Value {
        writeln!(stdin, "{req}").unwrap();
        stdin.flush().unwrap();
        let mut line = String::new();
        stdout.read_line(&mut line).unwrap();
        assert!(line.ends_with('\n'), "one full line per response: {line:?}");
        serde_json::from_str(&line).unwrap()
    };

    let r = send(&json!({"cmd": "init"}).to_string());
    assert_eq!(r["ok"], true);
    assert!(r["name"].is_string());

    let r = send(
        &json!({"cmd": "train", "manifest": train, "init_model": null, "budget": 10, "out_model": "m-1"}).to_string(),
    );
    assert_eq!(r, json!({"ok": true, "model": "m-1"}));
    let r = send(
        &json!({"cmd": "train", "manifest": train, "init_model": "m-1", "budget": 10, "out_model": "m-2"}).to_string(),
    );
    assert_eq!(r, json!({"ok": true, "model": "m-2"}));

    let r = send(&json!({"cmd": "detect", "manifest": test, "model": "m-2", "conf": 0.1}).to_string());
    assert_eq!(r["ok"], true);
    let dets = r["detections"].as_array().unwrap();
    assert!(!dets.is_empty());
    for d in dets {
        assert!(is_object_with(d, &["image_id", "class_id", "box", "score"]), "{d}");
        let s = d["score"].as_f64().unwrap();
        assert!((0.1..=1.0).contains(&s));
        let b: BBox = serde_json::from_value(d["box"].clone()).unwrap();
        assert!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 192.0 && b.y1 <= 144.0);
    }

    // errors are answered and the session continues
    for bad in [
        json!({"cmd": "detect", "manifest": test, "model": "never-trained", "conf": 0.5}),
        json!({"cmd": "train", "manifest": "/nonexistent/manifest.jsonl", "budget": 1, "out_model": "x"}),
        json!({"cmd": "fly"}),
    ] {
        let r = send(&bad.to_string());
        assert_eq!(r["ok"], false);
        assert!(r["error"].as_str().is_some_and(|e| !e.is_empty()));
    }
    let r = send("this is not json");
    assert_eq!(r["ok"], false);

    let r = send(&json!({"cmd": "init"}).to_string());
    assert_eq!(r["ok"], true);
    let r = send(&json!({"cmd": "shutdown"}).to_string());
    assert_eq!(r, json!({"ok": true}));
    drop(stdin);
    assert!(child.wait().unwrap().success());
}

#[test]
fn bridge_trains_and_detects_through_the_worker() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = datasets(dir.path());
    let spec: DetectorSpec = format!("external:{}", worker_command(&dir.path().join("worker")))
        .parse()
        .unwrap();
    let mut det = spec.open(&dir.path().join("models"), Duration::from_secs(120)).unwrap();
    assert_eq!(det.kind(), DetectorKind::External);
    let tr = deformsynth::dataset::read_manifest(&train).unwrap();
    let te = deformsynth::dataset::read_manifest(&test).unwrap();
    let m = det
        .train(&TrainRequest {
            training_set: &tr,
            manifest_path: &train,
            init_model: None,
            budget: 5,
            out_model: "w1".into(),
            step: TrainStep::new(Condition::Scale, Difficulty::Easy, 1),
        })
        .unwrap();
    assert_eq!(m.lineage.len(), 1);
    let dets = det.detect(&m, &te, &test, 0.5).unwrap();
    assert!(dets.iter().all(|d| d.score >= 0.5));
    let s = deformsynth::eval::evaluate_predictions(&dets, &te.ground_truth(), &Default::default()).unwrap();
    assert!(s.map > 0.0);
}

fn spawn_err(script: &str, timeout_ms: u64) -> Error {
    let dir = tempfile::tempdir().unwrap();
    match ExternalDetector::spawn(script, dir.path(), Duration::from_millis(timeout_ms)) {
        Ok(_) => panic!("{script} should fail"),
        Err(e) => e,
    }
}

#[test]
fn misbehaving_workers_are_reported() {
    assert!(matches!(spawn_err("echo not-json", 5000), Error::AdapterProtocol(_)));
    assert!(matches!(
        spawn_err("echo '{\"name\":\"x\"}'", 5000),
        Error::AdapterProtocol(_)
    ));
    assert!(matches!(
        spawn_err("echo '{\"ok\":true}'", 5000),
        Error::AdapterProtocol(_)
    ));
    assert!(matches!(spawn_err("exit 0", 5000), Error::DetectorUnavailable(_)));
    assert!(matches!(spawn_err("sleep 5", 200), Error::DetectorUnavailable(_)));
    match spawn_err("read l; echo '{\"ok\":false,\"error\":\"no gpu\"}'", 5000) {
        Error::DetectorUnavailable(m) => assert!(m.contains("no gpu")),
        e => panic!("{e}"),
    }
}

#[test]
fn worker_answering_the_wrong_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = datasets(dir.path());
    let script = r#"read l; echo '{"ok":true,"name":"liar"}'; read l; echo '{"ok":true,"model":"other"}'; read l"#;
    let mut det = ExternalDetector::spawn(script, &dir.path().join("models"), Duration::from_secs(5)).unwrap();
    assert_eq!(det.worker_name(), "liar");
    let tr = deformsynth::dataset::read_manifest(&train).unwrap();
    let err = det
        .train(&TrainRequest {
            training_set: &tr,
            manifest_path: &train,
            init_model: None,
            budget: 1,
            out_model: "mine".into(),
            step: TrainStep::adhoc(1),
        })
        .unwrap_err();
    assert!(matches!(err, Error::AdapterProtocol(_)));
}

#[test]
fn out_of_range_scores_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = datasets(dir.path());
    let det_line = r#"{"ok":true,"detections":[{"image_id":"a","class_id":0,"box":[0,0,1,1],"score":1.5}]}"#;
    let script = format!(r#"read l; echo '{{"ok":true,"name":"w"}}'; read l; echo '{det_line}'; read l"#);
    let mut det = ExternalDetector::spawn(&script, &dir.path().join("models"), Duration::from_secs(5)).unwrap();
    let te = deformsynth::dataset::read_manifest(&test).unwrap();
    let handle = deformsynth::detector::ModelHandle {
        model_id: "m".into(),
        kind: DetectorKind::External,
        lineage: vec![],
        storage_path: dir.path().join("models/m"),
    };
    assert!(matches!(
        det.detect(&handle, &te, &test, 0.5),
        Err(Error::AdapterProtocol(_))
    ));
}
