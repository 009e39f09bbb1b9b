//! Scripted detector for exercising the orchestrator deterministically.
//!
//! A script maps `(condition, difficulty, k)` of a model's latest training
//! step either to verbatim detections or to a target mAP. For a target, the
//! detector reports perfect boxes for the first `round(target * G_c)` ground
//! truths of each class `c` (in manifest order) and nothing else, so the
//! evaluated AP of class `c` is exactly `round(target * G_c) / G_c`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{finalize, Detector, DetectorKind, ModelHandle, TrainRequest, TrainStep};
use crate::conditions::{Condition, Difficulty};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::eval::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockOutput {
    Map {
        map: f64,
    },
    /// Target mAP per increment: entry `k - 1` for increment `k`, the last
    /// entry repeating beyond the end.
    Scores {
        scores: Vec<f64>,
    },
    Detections {
        detections: Vec<Detection>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    /// `None` matches any condition.
    #[serde(default)]
    pub condition: Option<Condition>,
    #[serde(default)]
    pub difficulty: Option<Difficulty>,
    /// `None` matches any increment.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(flatten)]
    pub output: MockOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MockScript {
    /// Used for models without a matching entry (including untrained ones).
    #[serde(default)]
    pub default_map: Option<f64>,
    #[serde(default)]
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.default_map.is_some_and(|v| !unit(v)) {
            return Err(Error::invalid("default_map must lie in [0, 1]"));
        }
        for e in &self.entries {
            match &e.output {
                MockOutput::Map { map } if !unit(*map) => return Err(Error::invalid("map must lie in [0, 1]")),
                MockOutput::Scores { scores } if scores.is_empty() || !scores.iter().all(|&s| unit(s)) => {
                    return Err(Error::invalid("scores must be a non-empty list in [0, 1]"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The output for a model whose last training step is `step`; exact `k`
    /// entries win over wildcard ones, earlier entries over later ones.
    pub fn lookup(&self, step: Option<&TrainStep>) -> Option<ScriptedOutput<'_>> {
        let matches = |e: &MockEntry, exact_k: bool| -> bool {
            let Some(s) = step else { return false };
            e.condition.is_none_or(|c| s.condition == Some(c))
                && e.difficulty.is_none_or(|d| s.difficulty == Some(d))
                && if exact_k { e.k == Some(s.k) } else { e.k.is_none() }
        };
        let entry = self
            .entries
            .iter()
            .find(|e| matches(e, true))
            .or_else(|| self.entries.iter().find(|e| matches(e, false)));
        match entry {
            Some(e) => Some(match &e.output {
                MockOutput::Map { map } => ScriptedOutput::Map(*map),
                MockOutput::Scores { scores } => {
                    let k = step.map_or(1, |s| s.k.max(1));
                    ScriptedOutput::Map(scores[(k - 1).min(scores.len() - 1)])
                }
                MockOutput::Detections { detections } => ScriptedOutput::Detections(detections),
            }),
            None => self.default_map.map(ScriptedOutput::Map),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedOutput<'a> {
    Map(f64),
    Detections(&'a [Detection]),
}

pub struct MockDetector {
    pub script: MockScript,
    models_dir: PathBuf,
    /// Number of `train` calls served.
    pub train_calls: usize,
    pub detect_calls: usize,
}

impl MockDetector {
    pub fn new(script: MockScript, models_dir: &Path) -> Result<Self> {
        script.validate()?;
        Ok(Self {
            script,
            models_dir: models_dir.to_path_buf(),
            train_calls: 0,
            detect_calls: 0,
        })
    }

    pub fn from_file(path: &Path, models_dir: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::AssetMissing(format!("mock script {}", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::new(serde_json::from_slice(&bytes)?, models_dir)
    }
}

/// Perfect detections for the first `round(target * G_c)` ground truths of
/// every class.
pub fn detections_for_target(images: &DatasetManifest, target: f64) -> Vec<Detection> {
    let mut per_class: std::collections::BTreeMap<u32, Vec<&crate::dataset::ManifestRecord>> = Default::default();
    for r in &images.records {
        per_class.entry(r.object_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for records in per_class.values() {
        let take = (target * records.len() as f64).round() as usize;
        for r in records.iter().take(take) {
            out.push(Detection {
                image_id: r.image_id.clone(),
                class_id: r.object_id,
                bbox: r.bbox,
                score: 1.0,
            });
        }
    }
    out
}

impl Detector for MockDetector {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Mock
    }

    fn name(&self) -> String {
        "mock".into()
    }

    fn train(&mut self, req: &TrainRequest<'_>) -> Result<ModelHandle> {
        req.validate()?;
        self.train_calls += 1;
        let handle = ModelHandle {
            model_id: req.out_model.clone(),
            kind: DetectorKind::Mock,
            lineage: req.lineage(),
            storage_path: self.models_dir.join(&req.out_model),
        };
        handle.save_meta(&serde_json::json!({ "training_samples": req.training_set.len() }))?;
        Ok(handle)
    }

    fn detect(
        &mut self,
        model: &ModelHandle,
        images: &DatasetManifest,
        _manifest_path: &Path,
        conf: f64,
    ) -> Result<Vec<Detection>> {
        if model.kind != DetectorKind::Mock {
            return Err(Error::ModelCorrupt(format!("{} is not a mock model", model.model_id)));
        }
        self.detect_calls += 1;
        let dets = match self.script.lookup(model.lineage.last()) {
            None => Vec::new(),
            Some(ScriptedOutput::Map(target)) => detections_for_target(images, target),
            Some(ScriptedOutput::Detections(d)) => d.to_vec(),
        };
        Ok(finalize(dets, conf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_json_and_lookup() {
        let script: MockScript = serde_json::from_str(
            r#"{"default_map":0.1,"entries":[
                {"condition":"fb","difficulty":"easy","scores":[0.2,0.4,0.5]},
                {"condition":"fb","difficulty":"easy","k":2,"map":0.9},
                {"map":0.7}
            ]}"#,
        )
        .unwrap();
        script.validate().unwrap();
        let step = |c, d, k| TrainStep::new(c, d, k);
        let get = |s: Option<TrainStep>| match script.lookup(s.as_ref()) {
            Some(ScriptedOutput::Map(m)) => m,
            other => panic!("{other:?}"),
        };
        assert_eq!(get(Some(step(Condition::FocusBlur, Difficulty::Easy, 1))), 0.2);
        assert_eq!(get(Some(step(Condition::FocusBlur, Difficulty::Easy, 2))), 0.9);
        assert_eq!(get(Some(step(Condition::FocusBlur, Difficulty::Easy, 40))), 0.5);
        assert_eq!(get(Some(step(Condition::Scale, Difficulty::Hard, 1))), 0.7);
        assert_eq!(get(None), 0.1);
    }

    #[test]
    fn out_of_range_script_rejected() {
        let s: MockScript = serde_json::from_str(r#"{"entries":[{"map":1.5}]}"#).unwrap();
        assert!(s.validate().is_err());
    }
}
