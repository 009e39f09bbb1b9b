//! The run configuration document shared by every CLI subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::conditions::Condition;
use crate::dataset::{AssetRegistry, RenderSettings};
use crate::detector::{Detector, DetectorSpec, ModelHandle};
use crate::error::{Error, Result};
use crate::orchestrator::{
    active_learn, learnability, ALConfig, LearnabilityConfig, LearnabilityResult, RunContext, RunLog,
};

/// Asset folders. `root` stands for `root/textures`, `root/backgrounds` and
/// (when present) `root/occluders`; explicit entries win over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AssetPaths {
    pub root: Option<PathBuf>,
    pub textures: Option<PathBuf>,
    pub backgrounds: Option<PathBuf>,
    pub occluders: Option<PathBuf>,
}

impl AssetPaths {
    fn resolved(&self) -> Result<(PathBuf, PathBuf, Option<PathBuf>)> {
        let from_root = |sub: &str| self.root.as_ref().map(|r| r.join(sub));
        let textures = self.textures.clone().or_else(|| from_root("textures"));
        let backgrounds = self.backgrounds.clone().or_else(|| from_root("backgrounds"));
        let occluders = self
            .occluders
            .clone()
            .or_else(|| from_root("occluders").filter(|p| p.is_dir()));
        match (textures, backgrounds) {
            (Some(t), Some(b)) => Ok((t, b, occluders)),
            _ => Err(Error::AssetMissing(
                "no asset folders configured (set assets.root or assets.textures and assets.backgrounds)".into(),
            )),
        }
    }

    pub fn load(&self, image_size: (usize, usize)) -> Result<AssetRegistry> {
        let (t, b, o) = self.resolved()?;
        AssetRegistry::load(&t, &b, o.as_deref(), image_size)
    }

    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.root,
            &mut self.textures,
            &mut self.backgrounds,
            &mut self.occluders,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub assets: AssetPaths,
    pub out: Option<PathBuf>,
    pub detector: DetectorSpec,
    /// Seconds an external worker may take to answer one request.
    pub detector_timeout_s: f64,
    pub render: RenderSettings,
    pub active_learning: ALConfig,
    pub learnability: LearnabilityConfig,
    /// Condition studied by the learnability protocol.
    pub condition: Option<Condition>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            assets: AssetPaths::default(),
            out: None,
            detector: DetectorSpec::Builtin,
            detector_timeout_s: crate::detector::external::DEFAULT_TIMEOUT.as_secs_f64(),
            render: RenderSettings::default(),
            active_learning: ALConfig::default(),
            learnability: LearnabilityConfig::default(),
            condition: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.assets.rebase(base);
        if let Some(out) = cfg.out.as_mut().filter(|o| o.is_relative()) {
            *out = base.join(&*out);
        }
        if let DetectorSpec::Mock(script) = &mut cfg.detector {
            if script.is_relative() {
                *script = base.join(&*script);
            }
        }
        Ok(cfg)
    }

    pub fn timeout(&self) -> Result<Duration> {
        Duration::try_from_secs_f64(self.detector_timeout_s)
            .ok()
            .filter(|d| !d.is_zero())
            .ok_or_else(|| Error::invalid("detector_timeout_s must be positive"))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::invalid("no output directory (set out or pass --out)"))
    }

    fn open_detector(&self, out: &Path) -> Result<Box<dyn Detector>> {
        self.detector.open(&out.join("models"), self.timeout()?)
    }

    /// Loads assets and the detector, then runs active learning under `out`.
    pub fn run_active_learning(&self, resume: bool) -> Result<(ModelHandle, RunLog)> {
        self.active_learning.validate()?;
        let out = self.out_dir()?;
        let registry = self.assets.load(self.render.image_size)?;
        let mut det = self.open_detector(out)?;
        let ctx = RunContext {
            registry: &registry,
            render: &self.render,
            out_dir: out,
        };
        active_learn(&self.active_learning, det.as_mut(), &ctx, resume)
    }

    pub fn run_learnability(&self, condition: Condition) -> Result<LearnabilityResult> {
        self.learnability.validate()?;
        let out = self.out_dir()?;
        let registry = self.assets.load(self.render.image_size)?;
        let mut det = self.open_detector(out)?;
        let ctx = RunContext {
            registry: &registry,
            render: &self.render,
            out_dir: out,
        };
        learnability(&self.learnability, condition, det.as_mut(), &ctx)
    }

    /// Both experiment sections use one master seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.active_learning.master_seed = seed;
        self.learnability.master_seed = seed;
    }
}
