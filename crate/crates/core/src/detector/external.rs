//! Bridge to a detector living in another process, speaking newline-delimited
//! JSON over the child's stdin/stdout:
//!
//! ```text
//! -> {"cmd":"init"}                                   <- {"ok":true,"name":s}
//! -> {"cmd":"train","manifest":p,"init_model":id|null,"budget":t,"out_model":id}
//!                                                     <- {"ok":true,"model":id}
//! -> {"cmd":"detect","manifest":p,"model":id,"conf":f} <- {"ok":true,"detections":[...]}
//! -> {"cmd":"shutdown"}                               <- {"ok":true}
//! any failure                                         <- {"ok":false,"error":s}
//! ```
//!
//! [`serve`] implements the worker side on top of [`BuiltinDetector`].

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};

use super::{finalize, BuiltinDetector, Detector, DetectorKind, ModelHandle, TrainRequest, TrainStep};
use crate::dataset::{read_manifest, DatasetManifest};
use crate::error::{Error, Result};
use crate::eval::Detection;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

pub struct ExternalDetector {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    pub timeout: Duration,
    models_dir: PathBuf,
    worker_name: String,
}

impl ExternalDetector {
    /// Starts `command` through `sh -c` and performs the init handshake.
    pub fn spawn(command: &str, models_dir: &Path, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::DetectorUnavailable(format!("cannot start {command:?}: {e}")))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut det = Self {
            child,
            stdin,
            lines: rx,
            timeout,
            models_dir: models_dir.to_path_buf(),
            worker_name: String::new(),
        };
        let resp = det.exchange(&json!({"cmd": "init"}))?;
        det.worker_name = resp
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::AdapterProtocol("init response lacks a string \"name\"".into()))?
            .to_string();
        Ok(det)
    }

    pub fn worker_name(&self) -> &str {
        &self.worker_name
    }

    /// Sends one request line and waits for one response line. Returns the
    /// response object when it reports success.
    pub fn exchange(&mut self, request: &Value) -> Result<Value> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::DetectorUnavailable("worker already shut down".into()))?;
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        // A worker that already exited may still have printed a line; judge that first.
        let written = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush());
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            _ if written.is_err() => {
                let e = written.unwrap_err();
                return Err(Error::DetectorUnavailable(format!("worker input closed: {e}")));
            }
            Ok(Err(e)) => return Err(Error::DetectorUnavailable(format!("reading worker output: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::DetectorUnavailable(format!(
                    "no response within {:.1} s",
                    self.timeout.as_secs_f64()
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::DetectorUnavailable("worker exited without responding".into()))
            }
        };
        let value: Value = serde_json::from_str(&reply)
            .map_err(|e| Error::AdapterProtocol(format!("malformed response line {reply:?}: {e}")))?;
        match value.get("ok").and_then(Value::as_bool) {
            Some(true) => Ok(value),
            Some(false) => {
                let msg = value
                    .get("error")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::AdapterProtocol(format!("failure without error message: {reply}")))?;
                Err(Error::DetectorUnavailable(format!("worker error: {msg}")))
            }
            None => Err(Error::AdapterProtocol(format!(
                "response lacks boolean \"ok\": {reply}"
            ))),
        }
    }

    /// Orderly shutdown: request, acknowledgement, process exit.
    pub fn shutdown(mut self) -> Result<()> {
        let r = self.exchange(&json!({"cmd": "shutdown"}));
        self.stdin = None;
        self.reap(self.timeout);
        r.map(|_| ())
    }

    fn reap(&mut self, grace: Duration) {
        let deadline = Instant::now() + grace;
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) => return,
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                _ => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    return;
                }
            }
        }
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        if self.stdin.is_some() {
            let saved = self.timeout;
            self.timeout = Duration::from_millis(500);
            let _ = self.exchange(&json!({"cmd": "shutdown"}));
            self.timeout = saved;
            self.stdin = None;
        }
        self.reap(Duration::from_millis(500));
    }
}

impl Detector for ExternalDetector {
    fn kind(&self) -> DetectorKind {
        DetectorKind::External
    }

    fn name(&self) -> String {
        format!("external:{}", self.worker_name)
    }

    fn train(&mut self, req: &TrainRequest<'_>) -> Result<ModelHandle> {
        req.validate()?;
        let resp = self.exchange(&json!({
            "cmd": "train",
            "manifest": req.manifest_path,
            "init_model": req.init_model.map(|m| m.model_id.as_str()),
            "budget": req.budget,
            "out_model": req.out_model,
        }))?;
        let model = resp
            .get("model")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::AdapterProtocol("train response lacks a string \"model\"".into()))?;
        if model != req.out_model {
            return Err(Error::AdapterProtocol(format!(
                "worker answered model {model:?} for out_model {:?}",
                req.out_model
            )));
        }
        let handle = ModelHandle {
            model_id: req.out_model.clone(),
            kind: DetectorKind::External,
            lineage: req.lineage(),
            storage_path: self.models_dir.join(&req.out_model),
        };
        handle.save_meta(&json!({ "worker": self.worker_name }))?;
        Ok(handle)
    }

    fn detect(
        &mut self,
        model: &ModelHandle,
        _images: &DatasetManifest,
        manifest_path: &Path,
        conf: f64,
    ) -> Result<Vec<Detection>> {
        let mut resp = self.exchange(&json!({
            "cmd": "detect",
            "manifest": manifest_path,
            "model": model.model_id,
            "conf": conf,
        }))?;
        let dets: Vec<Detection> = serde_json::from_value(resp["detections"].take())
            .map_err(|e| Error::AdapterProtocol(format!("bad detections array: {e}")))?;
        if let Some(d) = dets.iter().find(|d| !(0.0..=1.0).contains(&d.score)) {
            return Err(Error::AdapterProtocol(format!("score {} outside [0, 1]", d.score)));
        }
        Ok(finalize(dets, conf))
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase", deny_unknown_fields)]
enum Request {
    Init,
    Train {
        manifest: PathBuf,
        #[serde(default)]
        init_model: Option<String>,
        budget: usize,
        out_model: String,
    },
    Detect {
        manifest: PathBuf,
        model: String,
        conf: f64,
    },
    Shutdown,
}

/// Worker loop: one response line per request line until `shutdown` or end
/// of input. Bad requests are answered with `{"ok":false}` and skipped.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W, detector: &mut BuiltinDetector) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, stop) = match serde_json::from_str::<Request>(&line) {
            Err(e) => (json!({"ok": false, "error": format!("bad request: {e}")}), false),
            Ok(Request::Shutdown) => (json!({"ok": true}), true),
            Ok(req) => (
                handle_request(req, detector).unwrap_or_else(|e| json!({"ok": false, "error": e.to_string()})),
                false,
            ),
        };
        serde_json::to_writer(&mut output, &reply)?;
        output
            .write_all(b"\n")
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
        if stop {
            break;
        }
    }
    Ok(())
}

fn handle_request(req: Request, detector: &mut BuiltinDetector) -> Result<Value> {
    match req {
        Request::Init => Ok(json!({"ok": true, "name": "deformsynth-template-worker"})),
        Request::Train {
            manifest,
            init_model,
            budget,
            out_model,
        } => {
            let set = read_manifest(&manifest)?;
            let init = init_model.as_deref().map(|id| detector.open_model(id)).transpose()?;
            let k = init.as_ref().map_or(0, |m| m.lineage.len()) + 1;
            let h = detector.train(&TrainRequest {
                training_set: &set,
                manifest_path: &manifest,
                init_model: init.as_ref(),
                budget,
                out_model,
                step: TrainStep::adhoc(k),
            })?;
            Ok(json!({"ok": true, "model": h.model_id}))
        }
        Request::Detect { manifest, model, conf } => {
            let h = detector.open_model(&model)?;
            let set = read_manifest(&manifest)?;
            let dets = detector.detect(&h, &set, &manifest, conf)?;
            Ok(json!({"ok": true, "detections": dets}))
        }
        Request::Shutdown => Ok(json!({"ok": true})),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(input: &str) -> Vec<Value> {
        let dir = tempfile::tempdir().unwrap();
        let mut det = BuiltinDetector::new(dir.path());
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &mut det).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn worker_answers_every_line_and_stops_on_shutdown() {
        let r = session("{\"cmd\":\"init\"}\nnot json\n{\"cmd\":\"detect\",\"manifest\":\"/nope\",\"model\":\"zz\",\"conf\":0.8}\n{\"cmd\":\"shutdown\"}\n{\"cmd\":\"init\"}\n");
        assert_eq!(r.len(), 4);
        assert_eq!(r[0]["ok"], true);
        assert!(r[0]["name"].is_string());
        assert_eq!(r[1]["ok"], false);
        assert_eq!(r[2]["ok"], false);
        assert!(r[2]["error"].is_string());
        assert_eq!(r[3], json!({"ok": true}));
    }

    #[test]
    fn malformed_response_is_protocol_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = ExternalDetector::spawn("read l; echo not-json", dir.path(), Duration::from_secs(5));
        assert!(matches!(r, Err(Error::AdapterProtocol(_))), "{:?}", r.err());
    }

    #[test]
    fn silent_worker_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let r = ExternalDetector::spawn("read l; sleep 5", dir.path(), Duration::from_millis(200));
        assert!(matches!(r, Err(Error::DetectorUnavailable(_))), "{:?}", r.err());
    }

    #[test]
    fn exiting_worker_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let r = ExternalDetector::spawn("exit 3", dir.path(), Duration::from_secs(5));
        assert!(matches!(r, Err(Error::DetectorUnavailable(_))), "{:?}", r.err());
    }
}
