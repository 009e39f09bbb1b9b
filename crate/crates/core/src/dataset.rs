//! Asset ingestion, the per-sample rendering pipeline and dataset
//! persistence (PNG images plus a JSON-lines manifest).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditions::{sample_params, ConditionParams, Difficulty, Payload};
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::fx;
use crate::raster::{BBox, RgbImage};
use crate::render::{self, Camera, Pose, TextureAsset};
use crate::seed;
use crate::surface::{self, DeformConfig, DEFAULT_GRID};

/// Height in metres assigned to every texture; the width follows the
/// raster's aspect ratio (an A4 cover gives 0.21 x 0.297).
pub const TEXTURE_HEIGHT_M: f64 = 0.297;

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub id: String,
    pub image: RgbImage,
}

/// Read-only asset set shared by all rendering workers.
#[derive(Debug, Clone, Default)]
pub struct AssetRegistry {
    pub textures: BTreeMap<u32, TextureAsset>,
    pub backgrounds: Vec<Background>,
    pub occluders: Vec<TextureAsset>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::AssetMissing(format!("directory {}", dir.display())),
        _ => Error::io(dir, e),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn texture_from_image(object_id: u32, name: impl Into<String>, pixels: RgbImage) -> TextureAsset {
    let aspect = pixels.width as f64 / pixels.height as f64;
    TextureAsset {
        object_id,
        name: name.into(),
        pixels,
        physical_size: (TEXTURE_HEIGHT_M * aspect, TEXTURE_HEIGHT_M),
    }
}

impl AssetRegistry {
    /// Scans directories for PNG files. Textures get object ids `0..n` in
    /// file-name order; backgrounds are resampled to `image_size`.
    pub fn load(
        textures_dir: &Path,
        backgrounds_dir: &Path,
        occluders_dir: Option<&Path>,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let mut textures = BTreeMap::new();
        for (i, path) in png_files(textures_dir)?.iter().enumerate() {
            let id = i as u32;
            textures.insert(id, texture_from_image(id, stem(path), RgbImage::load_png(path)?));
        }
        let backgrounds = png_files(backgrounds_dir)?
            .iter()
            .map(|p| {
                Ok(Background {
                    id: stem(p),
                    image: RgbImage::load_png(p)?.resized(image_size.0, image_size.1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let occluders = match occluders_dir {
            Some(dir) => png_files(dir)?
                .iter()
                .enumerate()
                .map(|(i, p)| Ok(texture_from_image(i as u32, stem(p), RgbImage::load_png(p)?)))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let reg = Self {
            textures,
            backgrounds,
            occluders,
        };
        reg.validate(false)?;
        Ok(reg)
    }

    pub fn validate(&self, needs_occluders: bool) -> Result<()> {
        if self.textures.is_empty() {
            return Err(Error::AssetMissing("no object textures".into()));
        }
        if self.backgrounds.is_empty() {
            return Err(Error::AssetMissing("no background images".into()));
        }
        if needs_occluders && self.occluders.is_empty() {
            return Err(Error::AssetMissing(
                "occlusion scheduled but no occluder textures".into(),
            ));
        }
        Ok(())
    }

    pub fn object_ids(&self) -> Vec<u32> {
        self.textures.keys().copied().collect()
    }

    pub fn texture(&self, object_id: u32) -> Result<&TextureAsset> {
        self.textures
            .get(&object_id)
            .ok_or_else(|| Error::AssetMissing(format!("texture for object {object_id}")))
    }
}

/// Knobs of the rendering pipeline that are not part of θ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub image_size: (usize, usize),
    pub grid: (usize, usize),
    pub deform: DeformConfig,
    /// Replacement draws of θ when a render cannot be framed.
    pub max_resample: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            image_size: (640, 480),
            grid: DEFAULT_GRID,
            deform: DeformConfig::default(),
            max_resample: 100,
        }
    }
}

/// Every render parameter actually used for a sample, for auditing that
/// non-targeted conditions stayed canonical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderAudit {
    pub ruling_count: usize,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub translation: [f64; 3],
    pub scale: f64,
    pub visibility: f64,
    pub irradiance: f64,
    pub focus_kernel_pct: f64,
    pub motion_length_pct: f64,
    pub motion_angle: f64,
    /// Number of replacement draws of θ before the sample could be framed.
    pub resamples: usize,
}

impl RenderAudit {
    /// Canonical values with the payload of `theta` applied.
    pub fn from_theta(theta: &ConditionParams) -> Self {
        let mut a = RenderAudit {
            ruling_count: crate::conditions::ruling_count(Difficulty::Canonical),
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.0,
            translation: [0.0; 3],
            scale: 1.0,
            visibility: 1.0,
            irradiance: 1.0,
            focus_kernel_pct: 0.0,
            motion_length_pct: 0.0,
            motion_angle: 0.0,
            resamples: 0,
        };
        match theta.payload {
            Payload::FocusBlur { kernel_pct } => a.focus_kernel_pct = kernel_pct,
            Payload::MotionBlur { length_pct, angle } => {
                a.motion_length_pct = length_pct;
                a.motion_angle = angle;
            }
            Payload::PoseChange {
                roll,
                pitch,
                yaw,
                translation,
            } => {
                a.roll = roll;
                a.pitch = pitch;
                a.yaw = yaw;
                a.translation = translation;
            }
            Payload::Deformation { ruling_count } => a.ruling_count = ruling_count,
            Payload::ExternalOcclusion { visibility } => a.visibility = visibility,
            Payload::Scale { factor } => a.scale = factor,
            Payload::Lighting { irradiance, .. } => a.irradiance = irradiance,
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub image: RgbImage,
    pub bbox: BBox,
    pub object_id: u32,
    pub theta: ConditionParams,
    pub seed: u64,
    pub background_id: String,
    pub occluder_id: Option<String>,
    pub audit: RenderAudit,
}

/// Renders one image of `object_id` under `theta` (surface -> render -> fx).
pub fn render_sample(
    theta: &ConditionParams,
    object_id: u32,
    registry: &AssetRegistry,
    settings: &RenderSettings,
    sample_seed: u64,
) -> Result<RenderedSample> {
    let texture = registry.texture(object_id)?;
    let audit = RenderAudit::from_theta(theta);
    let (w, h) = settings.image_size;

    let sheet = surface::make_flat_sheet(
        texture.physical_size.0,
        texture.physical_size.1,
        settings.grid.0,
        settings.grid.1,
    )?;
    let deformation = surface::sample_deformation_with(
        &sheet,
        audit.ruling_count,
        seed::derive(sample_seed, &["deform".into()]),
        &settings.deform,
    )?;
    let mesh = surface::apply_deformation(&sheet, &deformation)?;
    let camera = Camera::default_for(w, h)?.with_pose(Pose {
        roll: audit.roll,
        pitch: audit.pitch,
        yaw: audit.yaw,
        position: audit.translation,
    });
    let mut sprite = render::render_object(&mesh, texture, &camera, audit.irradiance, audit.scale)?;

    let mut occluder_id = None;
    if audit.visibility < 1.0 {
        if registry.occluders.is_empty() {
            return Err(Error::AssetMissing("occluder textures".into()));
        }
        let mut rng = seed::rng(seed::derive(sample_seed, &["occluder".into()]));
        let occ = &registry.occluders[rng.random_range(0..registry.occluders.len())];
        sprite = render::add_occluder(&sprite, occ, audit.visibility, rng.random())?;
        occluder_id = Some(occ.name.clone());
    }

    if registry.backgrounds.is_empty() {
        return Err(Error::AssetMissing("background images".into()));
    }
    let mut rng = seed::rng(seed::derive(sample_seed, &["background".into()]));
    let bg = &registry.backgrounds[rng.random_range(0..registry.backgrounds.len())];
    if (bg.image.width, bg.image.height) != (w, h) {
        return Err(Error::invalid(format!(
            "background {} is {}x{}, expected {w}x{h}",
            bg.id, bg.image.width, bg.image.height
        )));
    }
    let (mut image, bbox) = render::composite(&sprite, &bg.image, rng.random())?;

    if audit.focus_kernel_pct > 0.0 {
        image = fx::gaussian_blur(&image, audit.focus_kernel_pct)?;
    }
    if audit.motion_length_pct > 0.0 {
        image = fx::motion_blur(&image, audit.motion_length_pct, audit.motion_angle)?;
    }

    Ok(RenderedSample {
        image,
        bbox,
        object_id,
        theta: *theta,
        seed: sample_seed,
        background_id: bg.id.clone(),
        occluder_id,
        audit,
    })
}

/// [`render_sample`], replacing θ by fresh draws from the same condition
/// and difficulty while the object cannot be framed (empty projection or a
/// sprite larger than the image).
pub fn render_sample_resampling(
    theta: &ConditionParams,
    object_id: u32,
    registry: &AssetRegistry,
    settings: &RenderSettings,
    sample_seed: u64,
) -> Result<RenderedSample> {
    let mut current = *theta;
    let mut last_err = None;
    for attempt in 0..=settings.max_resample {
        let attempt_seed = if attempt == 0 {
            sample_seed
        } else {
            seed::derive(sample_seed, &["retry".into(), attempt.into()])
        };
        match render_sample(&current, object_id, registry, settings, attempt_seed) {
            Ok(mut s) => {
                s.audit.resamples = attempt;
                return Ok(s);
            }
            Err(e @ (Error::EmptyProjection | Error::PlacementImpossible { .. } | Error::EmptyMask)) => {
                if theta.difficulty == Difficulty::Canonical {
                    return Err(e);
                }
                last_err = Some(e);
                let mut rng = seed::rng(seed::derive(sample_seed, &["theta".into(), attempt.into()]));
                current = sample_params(theta.condition(), theta.difficulty, &mut rng)?;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::SamplingExhausted {
        attempts: settings.max_resample + 1,
        what: format!(
            "a framable render ({})",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative paths resolve against the manifest's directory.
    pub image_path: PathBuf,
    pub image_id: String,
    pub object_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub theta: ConditionParams,
    pub seed: u64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occluder_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render: Option<RenderAudit>,
}

/// Lexical path from `base` to `path`; `path` unchanged when the two do
/// not share an anchor.
fn relative_to(path: &Path, base: &Path) -> PathBuf {
    use std::path::Component;
    if path.is_absolute() != base.is_absolute() || path.has_root() != base.has_root() {
        return path.to_path_buf();
    }
    fn norm(p: &Path) -> Vec<Component<'_>> {
        p.components().filter(|c| *c != Component::CurDir).collect()
    }
    let (p, b) = (norm(path), norm(base));
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if b[common..].contains(&Component::ParentDir) {
        return path.to_path_buf();
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    out.extend(&p[common..]);
    out
}

/// A dataset (S_tr or S_te): records plus the directory their relative
/// image paths are anchored at.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.base_dir.join(&record.image_path)
        }
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.records
            .iter()
            .map(|r| GroundTruth {
                image_id: r.image_id.clone(),
                class_id: r.object_id,
                bbox: r.bbox,
            })
            .collect()
    }

    /// Concatenation; relative paths of `other` are made absolute when the
    /// two manifests live in different directories.
    pub fn extend_from(&mut self, other: &DatasetManifest) {
        for r in &other.records {
            let mut r = r.clone();
            if other.base_dir != self.base_dir {
                r.image_path = relative_to(&other.image_path(&r), &self.base_dir);
            }
            self.records.push(r);
        }
    }

    /// Re-anchors every relative image path at `base`.
    pub fn rebase(&mut self, base: &Path) {
        for i in 0..self.records.len() {
            let full = self.image_path(&self.records[i]);
            self.records[i].image_path = relative_to(&full, base);
        }
        self.base_dir = base.to_path_buf();
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate image_id {}", r.image_id)));
            }
        }
        Ok(())
    }

    /// Every referenced image exists and decodes.
    pub fn verify_images(&self) -> Result<()> {
        for r in &self.records {
            let p = self.image_path(r);
            image::ImageReader::open(&p)
                .map_err(|e| Error::io(&p, e))?
                .decode()
                .map_err(|e| Error::Image {
                    path: p.clone(),
                    message: e.to_string(),
                })?;
        }
        Ok(())
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in &manifest.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    let manifest = DatasetManifest {
        records,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    manifest.check_unique_ids()?;
    Ok(manifest)
}

/// One image to render.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleJob {
    pub image_id: String,
    pub theta: ConditionParams,
    pub object_id: u32,
    pub seed: u64,
}

/// Renders `jobs` in parallel, writes `{image_id}.png` under `out_dir` and
/// returns the manifest (records in job order). The manifest file itself is
/// not written.
pub fn render_jobs(
    jobs: &[SampleJob],
    registry: &AssetRegistry,
    settings: &RenderSettings,
    out_dir: &Path,
    split: Split,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = jobs
        .par_iter()
        .map(|job| {
            let s = render_sample_resampling(&job.theta, job.object_id, registry, settings, job.seed)?;
            let file = format!("{}.png", job.image_id);
            s.image.save_png(&out_dir.join(&file))?;
            Ok(ManifestRecord {
                image_path: PathBuf::from(file),
                image_id: job.image_id.clone(),
                object_id: job.object_id,
                bbox: s.bbox,
                theta: s.theta,
                seed: job.seed,
                split,
                background_id: Some(s.background_id),
                occluder_id: s.occluder_id,
                render: Some(s.audit),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        records,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.check_unique_ids()?;
    Ok(manifest)
}

/// Naming and placement of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSpec {
    /// Prepended to every image id.
    pub prefix: String,
    pub split: Split,
    /// Manifest file name inside the output directory.
    pub manifest_name: String,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            prefix: String::new(),
            split: Split::Train,
            manifest_name: "manifest.jsonl".into(),
        }
    }
}

pub fn job_image_id(prefix: &str, theta_index: usize, object_id: u32) -> String {
    format!("{prefix}{theta_index:05}-o{object_id}")
}

/// One sample per `(theta, object)` pair; writes images and the manifest
/// to `out_dir`.
pub fn generate_data(
    thetas: &[ConditionParams],
    objects: &[u32],
    registry: &AssetRegistry,
    out_dir: &Path,
    rng_seed: u64,
    settings: &RenderSettings,
    spec: &GenerateSpec,
) -> Result<DatasetManifest> {
    let mut jobs = Vec::with_capacity(thetas.len() * objects.len());
    for (ti, theta) in thetas.iter().enumerate() {
        for &obj in objects {
            registry.texture(obj)?;
            jobs.push(SampleJob {
                image_id: job_image_id(&spec.prefix, ti, obj),
                theta: *theta,
                object_id: obj,
                seed: seed::derive(rng_seed, &[ti.into(), obj.into()]),
            });
        }
    }
    let manifest = render_jobs(&jobs, registry, settings, out_dir, spec.split)?;
    write_manifest(&manifest, &out_dir.join(&spec.manifest_name))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::{canonical_params, Condition};

    #[test]
    fn relative_paths_between_siblings() {
        let p = |s: &str| PathBuf::from(s);
        assert_eq!(relative_to(&p("out/train/a/x.png"), &p("out/train/b")), p("../a/x.png"));
        assert_eq!(relative_to(&p("/r/a/x.png"), &p("/r/a")), p("x.png"));
        assert_eq!(relative_to(&p("./out/a/x.png"), &p("out/b")), p("../a/x.png"));
        assert_eq!(relative_to(&p("/r/x.png"), &p("out")), p("/r/x.png"));
        let mut m = DatasetManifest {
            records: vec![record("a")],
            base_dir: p("out/k1"),
        };
        m.rebase(&p("out/k2"));
        assert_eq!(m.records[0].image_path, p("../k1/a.png"));
        assert_eq!(m.image_path(&m.records[0]), p("out/k2/../k1/a.png"));
    }

    fn record(id: &str) -> ManifestRecord {
        ManifestRecord {
            image_path: PathBuf::from(format!("{id}.png")),
            image_id: id.into(),
            object_id: 1,
            bbox: BBox::new(1.0, 2.0, 30.0, 40.0).unwrap(),
            theta: canonical_params(Condition::Scale),
            seed: 99,
            split: Split::Test,
            background_id: Some("bg0".into()),
            occluder_id: None,
            render: None,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            records: vec![record("a"), record("b")],
            base_dir: dir.path().to_path_buf(),
        };
        let p = dir.path().join("m.jsonl");
        write_manifest(&m, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), m);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&record("a")).unwrap();
        fs::write(&p, format!("{good}\n{}\n", &good[..good.len() / 2])).unwrap();
        match read_manifest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad_tag = good.replace("\"condition\":\"sc\"", "\"condition\":\"qq\"");
        fs::write(&p, format!("{bad_tag}\n")).unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = DatasetManifest {
            records: vec![record("a"), record("a")],
            base_dir: dir.path().to_path_buf(),
        };
        write_manifest(&m, &p).unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn audit_keeps_other_conditions_canonical() {
        let theta = ConditionParams {
            difficulty: Difficulty::Hard,
            payload: Payload::FocusBlur { kernel_pct: 2.5 },
        };
        let a = RenderAudit::from_theta(&theta);
        assert_eq!(a.focus_kernel_pct, 2.5);
        assert_eq!(
            (a.ruling_count, a.scale, a.visibility, a.irradiance),
            (2, 1.0, 1.0, 1.0)
        );
        assert_eq!((a.roll, a.pitch, a.yaw, a.translation), (0.0, 0.0, 0.0, [0.0; 3]));
        assert_eq!(a.motion_length_pct, 0.0);
    }

    #[test]
    fn empty_registry_is_missing_assets() {
        let reg = AssetRegistry::default();
        assert!(matches!(reg.validate(false), Err(Error::AssetMissing(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            AssetRegistry::load(&dir.path().join("nope"), dir.path(), None, (64, 48)),
            Err(Error::AssetMissing(_))
        ));
    }
}
