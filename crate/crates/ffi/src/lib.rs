//! C ABI over the deformsynth engine.
//!
//! Conventions:
//! - Every fallible function returns a [`DsStatus`]; on failure the message
//!   is available from [`ds_last_error`] on the same thread.
//! - Objects cross the boundary as opaque pointers created by `*_new`,
//!   `*_load` or `*_open` functions and released by the matching `*_free`.
//! - Strings returned through `char **` outputs are owned by the caller
//!   and must be released with [`ds_string_free`].
//! - Structured values (parameter records, detections, scores) travel as
//!   JSON text.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use deformsynth::conditions::{generate_parameters, Condition, ConditionParams, Difficulty};
use deformsynth::config::RunConfig;
use deformsynth::dataset::{render_sample_resampling, AssetRegistry, RenderSettings, RenderedSample};
use deformsynth::eval::{evaluate_predictions, Detection, EvalConfig, GroundTruth};
use deformsynth::orchestrator::{stopping_check, StopDecision};
use deformsynth::procedural::ProceduralAssets;
use deformsynth::Error;

/// Result codes. Values are stable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    InvalidArgument = 1,
    SamplingExhausted = 2,
    EmptyProjection = 3,
    PlacementImpossible = 4,
    EmptyMask = 5,
    UndefinedClass = 6,
    EmptyEvaluation = 7,
    UnknownCondition = 8,
    UnknownDifficulty = 9,
    DetectorUnavailable = 10,
    ModelCorrupt = 11,
    AdapterProtocol = 12,
    AssetMissing = 13,
    ParseError = 14,
    IoError = 15,
    ImageError = 16,
    JsonError = 17,
    NullPointer = 18,
    /// A Rust panic was caught at the boundary.
    Internal = 19,
}

impl From<&Error> for DsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => DsStatus::InvalidArgument,
            Error::SamplingExhausted { .. } => DsStatus::SamplingExhausted,
            Error::EmptyProjection => DsStatus::EmptyProjection,
            Error::PlacementImpossible { .. } => DsStatus::PlacementImpossible,
            Error::EmptyMask => DsStatus::EmptyMask,
            Error::UndefinedClass(_) => DsStatus::UndefinedClass,
            Error::EmptyEvaluation => DsStatus::EmptyEvaluation,
            Error::UnknownCondition(_) => DsStatus::UnknownCondition,
            Error::UnknownDifficulty(_) => DsStatus::UnknownDifficulty,
            Error::DetectorUnavailable(_) => DsStatus::DetectorUnavailable,
            Error::ModelCorrupt(_) => DsStatus::ModelCorrupt,
            Error::AdapterProtocol(_) => DsStatus::AdapterProtocol,
            Error::AssetMissing(_) => DsStatus::AssetMissing,
            Error::Parse { .. } => DsStatus::ParseError,
            Error::Io { .. } => DsStatus::IoError,
            Error::Image { .. } => DsStatus::ImageError,
            Error::Json(_) => DsStatus::JsonError,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Internal failure: a status plus its message.
struct Fail(DsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(DsStatus::from(&e), e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(DsStatus::JsonError, e.to_string())
    }
}

type R<T> = Result<T, Fail>;

/// Runs `f`, records any failure and converts it to a status.
fn guard(f: impl FnOnce() -> R<()>) -> DsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            DsStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DsStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> R<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// # Safety
/// `out` is null or valid for a pointer write.
unsafe fn write_string(out: *mut *mut c_char, s: String) -> R<()> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    let c = CString::new(s).map_err(|_| Fail(DsStatus::Internal, "string with NUL byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or a pointer previously returned through a `char **` output
/// of this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ds_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Draws `n` parameter records for a condition tag (`fb`, `mb`, ...) and a
/// difficulty (`easy`, `medium`, `hard`), written as a JSON array.
///
/// # Safety
/// `condition` and `difficulty` are NUL-terminated strings; `out_json` is
/// valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ds_generate_parameters(
    condition: *const c_char,
    difficulty: *const c_char,
    n: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> DsStatus {
    guard(|| {
        let c: Condition = str_arg(condition, "condition")?.parse()?;
        let d: Difficulty = str_arg(difficulty, "difficulty")?.parse()?;
        let params = generate_parameters(c, d, n, seed)?;
        write_string(out_json, serde_json::to_string(&params)?)
    })
}

/// Plateau test over `len` scores. Sets `*out_stop` to 1 and
/// `*out_best_index` (relative to the final window) when the run should
/// stop, else `*out_stop` to 0.
///
/// # Safety
/// `scores` points to `len` doubles (or is null when `len` is 0); the
/// output pointers are valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ds_stopping_check(
    scores: *const f64,
    len: usize,
    recent_window: usize,
    prior_window: usize,
    tau: f64,
    out_stop: *mut i32,
    out_best_index: *mut usize,
) -> DsStatus {
    guard(|| {
        if out_stop.is_null() || out_best_index.is_null() {
            return Err(null("output pointer"));
        }
        let p: &[f64] = if len == 0 {
            &[]
        } else if scores.is_null() {
            return Err(null("scores"));
        } else {
            std::slice::from_raw_parts(scores, len)
        };
        if recent_window < 1 || prior_window < 1 || !(tau > 0.0) {
            return Err(Fail(
                DsStatus::InvalidArgument,
                "windows must be >= 1 and tau > 0".into(),
            ));
        }
        match stopping_check(p, recent_window, prior_window, tau) {
            StopDecision::Continue => {
                *out_stop = 0;
                *out_best_index = 0;
            }
            StopDecision::Stop { best_index } => {
                *out_stop = 1;
                *out_best_index = best_index;
            }
        }
        Ok(())
    })
}

/// Scores detections against ground truth (both JSON arrays) and writes
/// the result `{per_class_ap, map, precision, recall}` as JSON.
///
/// # Safety
/// String arguments are NUL-terminated; `out_json` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ds_evaluate(
    detections_json: *const c_char,
    ground_truth_json: *const c_char,
    iou_threshold: f64,
    confidence_threshold: f64,
    out_json: *mut *mut c_char,
) -> DsStatus {
    guard(|| {
        let dets: Vec<Detection> = serde_json::from_str(str_arg(detections_json, "detections")?)?;
        let gts: Vec<GroundTruth> = serde_json::from_str(str_arg(ground_truth_json, "ground truth")?)?;
        let cfg = EvalConfig {
            iou_threshold,
            confidence_threshold,
        };
        cfg.validate()?;
        let score = evaluate_predictions(&dets, &gts, &cfg)?;
        write_string(out_json, serde_json::to_string(&score)?)
    })
}

/// Textures, backgrounds and occluders plus the render settings they were
/// prepared for.
pub struct DsAssets {
    registry: AssetRegistry,
    settings: RenderSettings,
}

fn settings_for(width: usize, height: usize) -> R<RenderSettings> {
    if width == 0 || height == 0 {
        return Err(Fail(DsStatus::InvalidArgument, "image size must be positive".into()));
    }
    Ok(RenderSettings {
        image_size: (width, height),
        ..RenderSettings::default()
    })
}

/// # Safety
/// `out` is valid for a pointer write.
unsafe fn write_assets(out: *mut *mut DsAssets, assets: DsAssets) -> R<()> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(assets));
    Ok(())
}

/// Loads PNG assets from folders; `occluders_dir` may be null.
///
/// # Safety
/// Directory arguments are NUL-terminated (or null where allowed); `out`
/// is valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ds_assets_load(
    textures_dir: *const c_char,
    backgrounds_dir: *const c_char,
    occluders_dir: *const c_char,
    width: usize,
    height: usize,
    out: *mut *mut DsAssets,
) -> DsStatus {
    guard(|| {
        let settings = settings_for(width, height)?;
        let t = PathBuf::from(str_arg(textures_dir, "textures_dir")?);
        let b = PathBuf::from(str_arg(backgrounds_dir, "backgrounds_dir")?);
        let o = if occluders_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(occluders_dir, "occluders_dir")?))
        };
        let registry = AssetRegistry::load(&t, &b, o.as_deref(), settings.image_size)?;
        write_assets(out, DsAssets { registry, settings })
    })
}

/// Builds seeded procedural assets in memory.
///
/// # Safety
/// `out` is valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ds_assets_procedural(
    objects: usize,
    backgrounds: usize,
    occluders: usize,
    width: usize,
    height: usize,
    seed: u64,
    out: *mut *mut DsAssets,
) -> DsStatus {
    guard(|| {
        if objects == 0 || backgrounds == 0 {
            return Err(Fail(
                DsStatus::InvalidArgument,
                "need at least one object and one background".into(),
            ));
        }
        let settings = settings_for(width, height)?;
        let spec = ProceduralAssets {
            objects,
            backgrounds,
            occluders,
            image_size: settings.image_size,
            ..ProceduralAssets::default()
        };
        write_assets(
            out,
            DsAssets {
                registry: spec.registry(seed),
                settings,
            },
        )
    })
}

/// Number of object textures; 0 for a null handle.
///
/// # Safety
/// `assets` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ds_assets_object_count(assets: *const DsAssets) -> usize {
    assets.as_ref().map_or(0, |a| a.registry.textures.len())
}

/// # Safety
/// `assets` is null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_assets_free(assets: *mut DsAssets) {
    if !assets.is_null() {
        drop(Box::from_raw(assets));
    }
}

/// One rendered image with its ground-truth box, as 8-bit RGB.
pub struct DsSample {
    rgb: Vec<u8>,
    width: usize,
    height: usize,
    sample: RenderedSample,
}

/// Renders `object_id` under the parameter record `theta_json` (one element
/// of [`ds_generate_parameters`] output).
///
/// # Safety
/// `assets` is a live handle, `theta_json` is NUL-terminated and `out` is
/// valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ds_render_sample(
    assets: *const DsAssets,
    theta_json: *const c_char,
    object_id: u32,
    seed: u64,
    out: *mut *mut DsSample,
) -> DsStatus {
    guard(|| {
        let a = assets.as_ref().ok_or_else(|| null("assets"))?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let theta: ConditionParams = serde_json::from_str(str_arg(theta_json, "theta")?)?;
        theta.validate()?;
        let sample = render_sample_resampling(&theta, object_id, &a.registry, &a.settings, seed)?;
        let rgb8 = sample.image.to_rgb8();
        *out = Box::into_raw(Box::new(DsSample {
            width: rgb8.width() as usize,
            height: rgb8.height() as usize,
            rgb: rgb8.into_raw(),
            sample,
        }));
        Ok(())
    })
}

/// # Safety
/// `s` is null or a live sample.
#[no_mangle]
pub unsafe extern "C" fn ds_sample_width(s: *const DsSample) -> usize {
    s.as_ref().map_or(0, |s| s.width)
}

/// # Safety
/// `s` is null or a live sample.
#[no_mangle]
pub unsafe extern "C" fn ds_sample_height(s: *const DsSample) -> usize {
    s.as_ref().map_or(0, |s| s.height)
}

/// Row-major RGB bytes, `width * height * 3` long, owned by the sample.
///
/// # Safety
/// `s` is null or a live sample.
#[no_mangle]
pub unsafe extern "C" fn ds_sample_pixels(s: *const DsSample) -> *const u8 {
    s.as_ref().map_or(ptr::null(), |s| s.rgb.as_ptr())
}

/// Writes the box as `[x0, y0, x1, y1]` into `out4`.
///
/// # Safety
/// `s` is a live sample and `out4` points to four writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_sample_bbox(s: *const DsSample, out4: *mut f64) -> DsStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("sample"))?;
        if out4.is_null() {
            return Err(null("output pointer"));
        }
        let b = s.sample.bbox;
        std::slice::from_raw_parts_mut(out4, 4).copy_from_slice(&[b.x0, b.y0, b.x1, b.y1]);
        Ok(())
    })
}

/// Render audit of the sample (every parameter actually used) as JSON.
///
/// # Safety
/// `s` is a live sample and `out_json` is valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ds_sample_audit(s: *const DsSample, out_json: *mut *mut c_char) -> DsStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("sample"))?;
        write_string(out_json, serde_json::to_string(&s.sample.audit)?)
    })
}

/// # Safety
/// `s` is null or a live sample, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_sample_free(s: *mut DsSample) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Runs active learning from a run-configuration file and writes a JSON
/// summary `{final_model, increments, run_log}`. Set `resume` to nonzero
/// to continue an interrupted run.
///
/// # Safety
/// `config_path` is NUL-terminated; `out_json` is valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ds_active_learn(
    config_path: *const c_char,
    resume: i32,
    out_json: *mut *mut c_char,
) -> DsStatus {
    guard(|| {
        let cfg = RunConfig::load(Path::new(str_arg(config_path, "config_path")?))?;
        let (model, log) = cfg.run_active_learning(resume != 0)?;
        let summary = serde_json::json!({
            "final_model": model,
            "increments": log.records.len(),
            "run_log": cfg.out_dir()?.join(deformsynth::orchestrator::RUN_LOG),
        });
        write_string(out_json, summary.to_string())
    })
}
