//! Trainable detector abstraction and its three implementations: a
//! template-pool baseline, a scripted mock and an external worker bridge.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditions::{Condition, Difficulty};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::eval::{iou, Detection};

pub mod builtin;
pub mod external;
pub mod mock;

pub use builtin::BuiltinDetector;
pub use external::ExternalDetector;
pub use mock::{MockDetector, MockScript};

/// Overlap above which a lower-scored detection of the same class and image
/// is suppressed.
pub const NMS_IOU: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    BuiltinTemplate,
    Mock,
    External,
}

/// One training call in a model's history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
    pub k: usize,
}

impl TrainStep {
    pub fn new(condition: Condition, difficulty: Difficulty, k: usize) -> Self {
        Self {
            condition: Some(condition),
            difficulty: Some(difficulty),
            k,
        }
    }

    /// A step outside any experiment schedule.
    pub fn adhoc(k: usize) -> Self {
        Self {
            condition: None,
            difficulty: None,
            k,
        }
    }
}

/// Persisted detector state (ω).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub model_id: String,
    pub kind: DetectorKind,
    pub lineage: Vec<TrainStep>,
    pub storage_path: PathBuf,
}

pub const HANDLE_FILE: &str = "meta.json";

impl ModelHandle {
    pub fn save_meta<T: Serialize>(&self, extra: &T) -> Result<()> {
        fs::create_dir_all(&self.storage_path).map_err(|e| Error::io(&self.storage_path, e))?;
        let doc = serde_json::json!({ "handle": self, "state": extra });
        let p = self.storage_path.join(HANDLE_FILE);
        fs::write(&p, serde_json::to_vec_pretty(&doc)?).map_err(|e| Error::io(&p, e))
    }

    /// Reads the handle stored in `dir`; failures are reported as a corrupt
    /// model.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let p = dir.join(HANDLE_FILE);
        let bytes = fs::read(&p).map_err(|e| Error::ModelCorrupt(format!("{}: {e}", p.display())))?;
        let mut doc: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| Error::ModelCorrupt(format!("{}: {e}", p.display())))?;
        let handle: ModelHandle = serde_json::from_value(doc["handle"].take())
            .map_err(|e| Error::ModelCorrupt(format!("{}: {e}", p.display())))?;
        Ok((handle, doc["state"].take()))
    }
}

/// Inputs of one training call. `init_model: None` starts from scratch.
#[derive(Debug, Clone)]
pub struct TrainRequest<'a> {
    pub training_set: &'a DatasetManifest,
    /// On-disk location of `training_set`, for detectors in other processes.
    pub manifest_path: &'a Path,
    pub init_model: Option<&'a ModelHandle>,
    /// Training-iteration hint t.
    pub budget: usize,
    pub out_model: String,
    pub step: TrainStep,
}

impl TrainRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.training_set.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if self.budget < 1 {
            return Err(Error::invalid("training budget must be at least 1"));
        }
        if self.out_model.is_empty() || self.out_model.contains(['/', '\\']) || self.out_model.starts_with('.') {
            return Err(Error::invalid(format!("unusable model id {:?}", self.out_model)));
        }
        Ok(())
    }

    pub fn lineage(&self) -> Vec<TrainStep> {
        let mut l = self.init_model.map(|m| m.lineage.clone()).unwrap_or_default();
        l.push(self.step);
        l
    }
}

pub trait Detector: Send {
    fn kind(&self) -> DetectorKind;

    /// Human-readable identification.
    fn name(&self) -> String;

    fn train(&mut self, req: &TrainRequest<'_>) -> Result<ModelHandle>;

    /// Detections on every image of `images` scoring at least `conf`,
    /// non-max suppressed per class and image.
    fn detect(
        &mut self,
        model: &ModelHandle,
        images: &DatasetManifest,
        manifest_path: &Path,
        conf: f64,
    ) -> Result<Vec<Detection>>;
}

/// Greedy per-(image, class) suppression: a detection survives iff no
/// higher-scored survivor overlaps it by more than `iou_threshold`. Output is
/// sorted by image, class, then descending score.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(a.class_id.cmp(&b.class_id))
            .then(b.score.total_cmp(&a.score))
    });
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    let mut group_start = 0;
    for d in dets {
        if kept
            .last()
            .is_some_and(|k| k.image_id != d.image_id || k.class_id != d.class_id)
        {
            group_start = kept.len();
        }
        if kept[group_start..]
            .iter()
            .all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// Drops detections below `conf` and applies [`nms`] with [`NMS_IOU`].
pub fn finalize(dets: Vec<Detection>, conf: f64) -> Vec<Detection> {
    nms(dets.into_iter().filter(|d| d.score >= conf).collect(), NMS_IOU)
}

/// Which detector a run uses: `builtin`, `mock:<script path>` or
/// `external:<shell command>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DetectorSpec {
    Builtin,
    Mock(PathBuf),
    External(String),
}

impl std::str::FromStr for DetectorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "builtin" {
            Ok(Self::Builtin)
        } else if let Some(p) = s.strip_prefix("mock:").filter(|p| !p.is_empty()) {
            Ok(Self::Mock(PathBuf::from(p)))
        } else if let Some(c) = s.strip_prefix("external:").filter(|c| !c.trim().is_empty()) {
            Ok(Self::External(c.to_string()))
        } else {
            Err(Error::invalid(format!(
                "detector must be builtin, mock:<script> or external:<command>, got {s:?}"
            )))
        }
    }
}

impl TryFrom<String> for DetectorSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DetectorSpec> for String {
    fn from(d: DetectorSpec) -> Self {
        match d {
            DetectorSpec::Builtin => "builtin".into(),
            DetectorSpec::Mock(p) => format!("mock:{}", p.display()),
            DetectorSpec::External(c) => format!("external:{c}"),
        }
    }
}

impl DetectorSpec {
    /// Instantiates the detector, storing models under `models_dir`.
    pub fn open(&self, models_dir: &Path, timeout: std::time::Duration) -> Result<Box<dyn Detector>> {
        Ok(match self {
            Self::Builtin => Box::new(BuiltinDetector::new(models_dir)),
            Self::Mock(script) => Box::new(MockDetector::from_file(script, models_dir)?),
            Self::External(cmd) => Box::new(ExternalDetector::spawn(cmd, models_dir, timeout)?),
        })
    }
}
