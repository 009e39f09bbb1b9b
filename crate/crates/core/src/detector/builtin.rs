//! Template-pool detector scored by normalized cross-correlation (NCC).
//!
//! Training crops every ground-truth box to a 48x48 grayscale template
//! (zero mean, unit norm) and appends it to a per-class pool. Detection
//! slides windows over a scale pyramid anchored at each class's median
//! training box size, proposes the best-correlated windows from a 12x12
//! summary of each template, refines each proposal's edges by hill climbing
//! and scores the final box against the full pool.
//!
//! Crops are area averages computed from an integral image, so a window
//! identical to a training box reproduces its template exactly and scores
//! 1.0.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{finalize, Detector, DetectorKind, ModelHandle, TrainRequest};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::eval::{iou, Detection};
use crate::raster::{BBox, GrayImage, RgbImage};

pub const TEMPLATE_SIDE: usize = 48;
const COARSE_SIDE: usize = 12;
pub const POOL_CAP: usize = 256;
pub const PYRAMID_SCALES: [f64; 6] = [0.5, 0.71, 1.0, 1.41, 2.0, 2.83];
pub const STRIDE: usize = 8;
const POOL_FILE: &str = "pool.bin";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuiltinConfig {
    pub pool_cap: usize,
    pub stride: usize,
    /// Coarse windows per class and image that get aligned.
    pub proposals: usize,
    /// Aligned proposals per class and image that get fully refined.
    pub finalists: usize,
    /// Proposals overlapping an earlier one by more than this are skipped.
    pub proposal_overlap: f64,
    /// Templates (best coarse matches) consulted while refining.
    pub refine_templates: usize,
    /// Smallest box side in pixels.
    pub min_side: f64,
}

impl Default for BuiltinConfig {
    fn default() -> Self {
        Self {
            pool_cap: POOL_CAP,
            stride: STRIDE,
            proposals: 24,
            finalists: 3,
            proposal_overlap: 0.3,
            refine_templates: 8,
            min_side: 8.0,
        }
    }
}

/// Summed-area table of a grayscale image.
pub struct Integral {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl Integral {
    pub fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width, img.height);
        let mut sums = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f64::from(img.get(x, y));
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self {
            width: w,
            height: h,
            sums,
        }
    }

    /// Pixel index and in-pixel fraction of a coordinate along one axis,
    /// where the prefix-sum table is linear between samples.
    fn split(v: f64, len: usize) -> (usize, f64) {
        let v = v.clamp(0.0, len as f64);
        let i = (v.floor() as usize).min(len.saturating_sub(1));
        (i, v - i as f64)
    }

    /// Integral of the piecewise-constant image over `[0, x] x [0, y]`.
    #[cfg(test)]
    fn at(&self, x: f64, y: f64) -> f64 {
        let stride = self.width + 1;
        let (xi, tx) = Self::split(x, self.width);
        let (yi, ty) = Self::split(y, self.height);
        let v = |i: usize, j: usize| self.sums[j * stride + i];
        let top = v(xi, yi) + (v(xi + 1, yi) - v(xi, yi)) * tx;
        let bottom = v(xi, yi + 1) + (v(xi + 1, yi + 1) - v(xi, yi + 1)) * tx;
        top + (bottom - top) * ty
    }

    /// `side x side` cell means over `bbox`, zero-mean and unit-norm.
    /// `None` for a (near) constant patch.
    pub fn descriptor(&self, bbox: &BBox, side: usize) -> Option<Vec<f32>> {
        let mut out = vec![0.0; side * side];
        self.descriptor_into(bbox, side, &mut out).then_some(out)
    }

    /// [`Integral::descriptor`] into a caller buffer of `side * side`
    /// values; returns false (leaving `out` unspecified) for a flat patch.
    pub fn descriptor_into(&self, bbox: &BBox, side: usize, out: &mut [f32]) -> bool {
        debug_assert_eq!(out.len(), side * side);
        let n = side + 1;
        let (cw, ch) = (bbox.width() / side as f64, bbox.height() / side as f64);
        let stride = self.width + 1;
        let cols: Vec<(usize, f64)> = (0..n)
            .map(|i| Self::split(bbox.x0 + i as f64 * cw, self.width))
            .collect();
        // integral at every cell corner, bilinear inside each pixel
        let mut grid = vec![0.0f64; n * n];
        for j in 0..n {
            let (yi, ty) = Self::split(bbox.y0 + j as f64 * ch, self.height);
            let (r0, r1) = (&self.sums[yi * stride..], &self.sums[(yi + 1) * stride..]);
            for (i, &(xi, tx)) in cols.iter().enumerate() {
                let top = r0[xi] + (r0[xi + 1] - r0[xi]) * tx;
                let bottom = r1[xi] + (r1[xi + 1] - r1[xi]) * tx;
                grid[j * n + i] = top + (bottom - top) * ty;
            }
        }
        let mut cells = vec![0.0f64; side * side];
        for j in 0..side {
            for i in 0..side {
                cells[j * side + i] =
                    grid[(j + 1) * n + i + 1] - grid[(j + 1) * n + i] - grid[j * n + i + 1] + grid[j * n + i];
            }
        }
        normalize_into(&cells, out)
    }
}

fn normalize_into(cells: &[f64], out: &mut [f32]) -> bool {
    let n = cells.len() as f64;
    let mean = cells.iter().sum::<f64>() / n;
    let norm = cells.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>().sqrt();
    let scale = cells.iter().map(|c| c.abs()).fold(0.0, f64::max);
    // constant up to rounding noise
    if norm == 0.0 || norm <= 1e-7 * scale * n.sqrt() {
        return false;
    }
    for (o, c) in out.iter_mut().zip(cells) {
        *o = ((c - mean) / norm) as f32;
    }
    true
}

fn normalize(cells: &[f64]) -> Option<Vec<f32>> {
    let mut out = vec![0.0; cells.len()];
    normalize_into(cells, &mut out).then_some(out)
}

/// Block-averages a fine template to the coarse proposal resolution.
fn coarsen(fine: &[f32]) -> Vec<f32> {
    let f = TEMPLATE_SIDE / COARSE_SIDE;
    let mut cells = vec![0.0f64; COARSE_SIDE * COARSE_SIDE];
    for y in 0..TEMPLATE_SIDE {
        for x in 0..TEMPLATE_SIDE {
            cells[(y / f) * COARSE_SIDE + x / f] += f64::from(fine[y * TEMPLATE_SIDE + x]);
        }
    }
    normalize(&cells).unwrap_or_else(|| vec![0.0; COARSE_SIDE * COARSE_SIDE])
}

/// Correlation of two normalized descriptors, in `[-1, 1]`.
pub fn ncc(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    dot.clamp(-1.0, 1.0)
}

/// Template of `bbox` in `image`.
pub fn template_from_crop(image: &RgbImage, bbox: &BBox) -> Option<Vec<f32>> {
    Integral::new(&image.to_gray()).descriptor(bbox, TEMPLATE_SIDE)
}

/// Templates of one class, stored row-wise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassPool {
    pub templates: Vec<f32>,
    /// Source box size `[w, h]` per template.
    pub sizes: Vec<[f64; 2]>,
}

impl ClassPool {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn template(&self, i: usize) -> &[f32] {
        &self.templates[i * TEMPLATE_SIDE * TEMPLATE_SIDE..(i + 1) * TEMPLATE_SIDE * TEMPLATE_SIDE]
    }

    fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), TEMPLATE_SIDE * TEMPLATE_SIDE), &self.templates).expect("pool shape")
    }

    fn push(&mut self, template: &[f32], size: [f64; 2]) {
        self.templates.extend_from_slice(template);
        self.sizes.push(size);
    }

    /// Median source box size, the pyramid's unit scale.
    pub fn reference_size(&self) -> [f64; 2] {
        let median = |k: usize| {
            let mut v: Vec<f64> = self.sizes.iter().map(|s| s[k]).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        };
        [median(0), median(1)]
    }

    /// Evicts, one at a time, the template most correlated with any other
    /// remaining one until at most `cap` remain. Ties evict the newest.
    pub fn enforce_cap(&mut self, cap: usize) {
        let n = self.len();
        if n <= cap {
            return;
        }
        let v = self.view();
        let gram = v.dot(&v.t());
        let mut alive = vec![true; n];
        let row_max = |i: usize, alive: &[bool]| {
            (0..n)
                .filter(|&j| j != i && alive[j])
                .map(|j| gram[[i, j]])
                .fold(f32::NEG_INFINITY, f32::max)
        };
        let mut best: Vec<f32> = (0..n).map(|i| row_max(i, &alive)).collect();
        let mut remaining = n;
        while remaining > cap {
            let mut victim = 0;
            let mut top = f32::NEG_INFINITY;
            for i in (0..n).filter(|&i| alive[i]) {
                if best[i] >= top {
                    top = best[i];
                    victim = i;
                }
            }
            alive[victim] = false;
            remaining -= 1;
            for i in 0..n {
                if alive[i] && gram[[i, victim]] >= best[i] {
                    best[i] = row_max(i, &alive);
                }
            }
        }
        let mut kept = ClassPool::default();
        for i in (0..n).filter(|&i| alive[i]) {
            kept.push(self.template(i), self.sizes[i]);
        }
        *self = kept;
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TemplatePool {
    pub classes: BTreeMap<u32, ClassPool>,
}

#[derive(Serialize, Deserialize)]
struct PoolMeta {
    template_side: usize,
    classes: Vec<ClassMeta>,
}

#[derive(Serialize, Deserialize)]
struct ClassMeta {
    class_id: u32,
    sizes: Vec<[f64; 2]>,
}

impl TemplatePool {
    pub fn total(&self) -> usize {
        self.classes.values().map(ClassPool::len).sum()
    }

    fn save(&self, handle: &ModelHandle) -> Result<()> {
        let meta = PoolMeta {
            template_side: TEMPLATE_SIDE,
            classes: self
                .classes
                .iter()
                .map(|(&class_id, p)| ClassMeta {
                    class_id,
                    sizes: p.sizes.clone(),
                })
                .collect(),
        };
        handle.save_meta(&meta)?;
        let mut blob = Vec::with_capacity(self.total() * TEMPLATE_SIDE * TEMPLATE_SIDE * 4);
        for p in self.classes.values() {
            for v in &p.templates {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = handle.storage_path.join(POOL_FILE);
        fs::write(&path, blob).map_err(|e| Error::io(&path, e))
    }

    fn load(handle: &ModelHandle) -> Result<Self> {
        let corrupt = |m: String| Error::ModelCorrupt(format!("{}: {m}", handle.model_id));
        let (_, state) = ModelHandle::load(&handle.storage_path)?;
        let meta: PoolMeta = serde_json::from_value(state).map_err(|e| corrupt(e.to_string()))?;
        if meta.template_side != TEMPLATE_SIDE {
            return Err(corrupt(format!("template side {}", meta.template_side)));
        }
        let path = handle.storage_path.join(POOL_FILE);
        let blob = fs::read(&path).map_err(|e| corrupt(e.to_string()))?;
        let per = TEMPLATE_SIDE * TEMPLATE_SIDE;
        let expected: usize = meta.classes.iter().map(|c| c.sizes.len() * per * 4).sum();
        if blob.len() != expected {
            return Err(corrupt(format!(
                "pool blob has {} bytes, expected {expected}",
                blob.len()
            )));
        }
        let mut floats = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut classes = BTreeMap::new();
        for c in meta.classes {
            let templates: Vec<f32> = floats.by_ref().take(c.sizes.len() * per).collect();
            if templates.iter().any(|v| !v.is_finite()) {
                return Err(corrupt("non-finite template value".into()));
            }
            classes.insert(
                c.class_id,
                ClassPool {
                    templates,
                    sizes: c.sizes,
                },
            );
        }
        Ok(Self { classes })
    }
}

/// Bytes of integral images kept between detect calls.
const CACHE_BYTES: usize = 256 << 20;

/// Integral images of test images, which the active-learning loop scores
/// once per increment. Keyed by path, file length and modification time;
/// entries are added until the byte budget is spent.
#[derive(Default)]
struct IntegralCache {
    entries: HashMap<PathBuf, (u64, Option<SystemTime>, Arc<Integral>)>,
    bytes: usize,
}

impl IntegralCache {
    fn get_or_load(cache: &Mutex<Self>, path: &Path) -> Result<Arc<Integral>> {
        let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
        let stamp = (meta.len(), meta.modified().ok());
        if let Some((len, mtime, ii)) = cache.lock().expect("cache lock").entries.get(path) {
            if (*len, *mtime) == stamp {
                return Ok(Arc::clone(ii));
            }
        }
        let ii = Arc::new(Integral::new(&RgbImage::load_png(path)?.to_gray()));
        let size = ii.sums.len() * std::mem::size_of::<f64>();
        let mut c = cache.lock().expect("cache lock");
        if let Some((_, _, old)) = c.entries.remove(path) {
            c.bytes -= old.sums.len() * std::mem::size_of::<f64>();
        }
        if c.bytes + size <= CACHE_BYTES {
            c.bytes += size;
            c.entries
                .insert(path.to_path_buf(), (stamp.0, stamp.1, Arc::clone(&ii)));
        }
        Ok(ii)
    }
}

pub struct BuiltinDetector {
    models_dir: PathBuf,
    pub config: BuiltinConfig,
    cache: Mutex<IntegralCache>,
}

impl BuiltinDetector {
    pub fn new(models_dir: &Path) -> Self {
        Self::with_config(models_dir, BuiltinConfig::default())
    }

    pub fn with_config(models_dir: &Path, config: BuiltinConfig) -> Self {
        Self {
            models_dir: models_dir.to_path_buf(),
            config,
            cache: Mutex::default(),
        }
    }

    fn handle(&self, model_id: &str, lineage: Vec<super::TrainStep>) -> ModelHandle {
        ModelHandle {
            model_id: model_id.to_string(),
            kind: DetectorKind::BuiltinTemplate,
            lineage,
            storage_path: self.models_dir.join(model_id),
        }
    }

    /// Persists a model with an empty pool.
    pub fn empty_model(&self, model_id: &str) -> Result<ModelHandle> {
        let h = self.handle(model_id, Vec::new());
        TemplatePool::default().save(&h)?;
        Ok(h)
    }

    /// Handle of a model previously stored under this detector's directory.
    pub fn open_model(&self, model_id: &str) -> Result<ModelHandle> {
        let (h, _) = ModelHandle::load(&self.models_dir.join(model_id))?;
        if h.kind != DetectorKind::BuiltinTemplate {
            return Err(Error::ModelCorrupt(format!("{model_id} is not a template model")));
        }
        Ok(h)
    }

    pub fn load_pool(&self, model: &ModelHandle) -> Result<TemplatePool> {
        TemplatePool::load(model)
    }

    pub fn detect_image(&self, pool: &TemplatePool, image_id: &str, image: &RgbImage) -> Vec<Detection> {
        self.detect_integral(pool, image_id, &Integral::new(&image.to_gray()))
    }

    fn detect_integral(&self, pool: &TemplatePool, image_id: &str, integral: &Integral) -> Vec<Detection> {
        let mut out = Vec::new();
        for (&class_id, cp) in &pool.classes {
            if cp.is_empty() {
                continue;
            }
            for (bbox, score) in self.detect_class(cp, integral) {
                out.push(Detection {
                    image_id: image_id.to_string(),
                    class_id,
                    bbox,
                    score,
                });
            }
        }
        out
    }

    fn windows(&self, cp: &ClassPool, w: usize, h: usize) -> Vec<BBox> {
        let [rw, rh] = cp.reference_size();
        let mut out = Vec::new();
        for s in PYRAMID_SCALES {
            let (ww, wh) = (s * rw, s * rh);
            if ww > w as f64 || wh > h as f64 || ww < self.config.min_side || wh < self.config.min_side {
                continue;
            }
            let nx = ((w as f64 - ww) / self.config.stride as f64).floor() as usize;
            let ny = ((h as f64 - wh) / self.config.stride as f64).floor() as usize;
            for j in 0..=ny {
                for i in 0..=nx {
                    let (x0, y0) = ((i * self.config.stride) as f64, (j * self.config.stride) as f64);
                    out.push(BBox {
                        x0,
                        y0,
                        x1: x0 + ww,
                        y1: y0 + wh,
                    });
                }
            }
        }
        out
    }

    fn detect_class(&self, cp: &ClassPool, integral: &Integral) -> Vec<(BBox, f64)> {
        let windows = self.windows(cp, integral.width, integral.height);
        if windows.is_empty() {
            return Vec::new();
        }
        let cd = COARSE_SIDE * COARSE_SIDE;
        let coarse_pool: Vec<f32> = (0..cp.len()).flat_map(|i| coarsen(cp.template(i))).collect();
        let coarse_pool = Array2::from_shape_vec((cp.len(), cd), coarse_pool).expect("coarse shape");
        let mut rows = vec![0.0f32; windows.len() * cd];
        let valid: Vec<bool> = windows
            .iter()
            .zip(rows.chunks_mut(cd))
            .map(|(b, row)| {
                let ok = integral.descriptor_into(b, COARSE_SIDE, row);
                if !ok {
                    row.fill(0.0);
                }
                ok
            })
            .collect();
        let wmat = Array2::from_shape_vec((windows.len(), cd), rows).expect("window shape");
        let scores = wmat.dot(&coarse_pool.t());

        let mut order: Vec<(usize, f32)> = (0..windows.len())
            .filter(|&k| valid[k])
            .map(|k| (k, scores.row(k).fold(f32::NEG_INFINITY, |a, &b| a.max(b))))
            .collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut proposals: Vec<usize> = Vec::new();
        for (k, _) in order {
            if proposals.len() >= self.config.proposals {
                break;
            }
            if proposals
                .iter()
                .all(|&p| iou(&windows[p], &windows[k]) <= self.config.proposal_overlap)
            {
                proposals.push(k);
            }
        }

        // cheap alignment of every proposal at the coarse resolution
        let mut aligned: Vec<(BBox, f64, Vec<usize>)> = proposals
            .into_iter()
            .map(|k| {
                let row = scores.row(k);
                let mut idx: Vec<usize> = (0..cp.len()).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                idx.truncate(self.config.refine_templates.max(1));
                let subset: Vec<&[f32]> = idx
                    .iter()
                    .map(|&i| coarse_pool.row(i).to_slice().expect("contiguous"))
                    .collect();
                let (b, sc) = self.refine(integral, windows[k], &subset, COARSE_SIDE, &[8.0, 4.0, 2.0]);
                (b, sc, idx)
            })
            .collect();
        aligned.sort_by(|a, b| b.1.total_cmp(&a.1));

        let mut finalists: Vec<(BBox, Vec<usize>)> = Vec::new();
        for (b, _, idx) in aligned {
            if finalists.len() >= self.config.finalists {
                break;
            }
            if finalists
                .iter()
                .all(|(f, _)| iou(f, &b) <= self.config.proposal_overlap)
            {
                finalists.push((b, idx));
            }
        }

        finalists
            .into_iter()
            .filter_map(|(b, idx)| {
                let subset: Vec<&[f32]> = idx.iter().map(|&i| cp.template(i)).collect();
                // image content is pixel aligned; finish on whole-pixel edges
                let b = self.snap(integral, b);
                let (b, _) = self.refine(integral, b, &subset, TEMPLATE_SIDE, &[2.0, 1.0]);
                let d = integral.descriptor(&b, TEMPLATE_SIDE)?;
                let dv = ndarray::ArrayView1::from(&d[..]);
                let best = cp.view().dot(&dv).fold(f32::NEG_INFINITY, |a, &x| a.max(x));
                Some((b, f64::from(best).clamp(0.0, 1.0)))
            })
            .collect()
    }

    fn snap(&self, integral: &Integral, b: BBox) -> BBox {
        let (w, h) = (integral.width as f64, integral.height as f64);
        let x0 = b.x0.round().clamp(0.0, w - self.config.min_side);
        let y0 = b.y0.round().clamp(0.0, h - self.config.min_side);
        BBox {
            x0,
            y0,
            x1: b.x1.round().clamp(x0 + self.config.min_side, w),
            y1: b.y1.round().clamp(y0 + self.config.min_side, h),
        }
    }

    /// Steepest-ascent search over single edges, whole-box shifts and
    /// symmetric growth.
    fn refine(&self, integral: &Integral, start: BBox, subset: &[&[f32]], side: usize, steps: &[f64]) -> (BBox, f64) {
        let score = |b: &BBox| -> f64 {
            match integral.descriptor(b, side) {
                Some(d) => subset.iter().map(|t| ncc(&d, t)).fold(f64::NEG_INFINITY, f64::max),
                None => f64::NEG_INFINITY,
            }
        };
        let (w, h) = (integral.width as f64, integral.height as f64);
        let min = self.config.min_side;
        let feasible =
            |b: &BBox| b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= w && b.y1 <= h && b.width() >= min && b.height() >= min;
        let mut cur = start;
        let mut cur_score = score(&cur);
        for &s in steps {
            for _ in 0..64 {
                let moves = [
                    [s, 0.0, s, 0.0],
                    [-s, 0.0, -s, 0.0],
                    [0.0, s, 0.0, s],
                    [0.0, -s, 0.0, -s],
                    [s, 0.0, 0.0, 0.0],
                    [-s, 0.0, 0.0, 0.0],
                    [0.0, s, 0.0, 0.0],
                    [0.0, -s, 0.0, 0.0],
                    [0.0, 0.0, s, 0.0],
                    [0.0, 0.0, -s, 0.0],
                    [0.0, 0.0, 0.0, s],
                    [0.0, 0.0, 0.0, -s],
                    [-s, 0.0, s, 0.0],
                    [s, 0.0, -s, 0.0],
                    [0.0, -s, 0.0, s],
                    [0.0, s, 0.0, -s],
                    [-s, -s, s, s],
                    [s, s, -s, -s],
                ];
                let mut best: Option<(BBox, f64)> = None;
                for m in moves {
                    let b = BBox {
                        x0: cur.x0 + m[0],
                        y0: cur.y0 + m[1],
                        x1: cur.x1 + m[2],
                        y1: cur.y1 + m[3],
                    };
                    if !feasible(&b) {
                        continue;
                    }
                    let sc = score(&b);
                    if sc > cur_score && best.is_none_or(|(_, bs)| sc > bs) {
                        best = Some((b, sc));
                    }
                }
                match best {
                    Some((b, sc)) => {
                        cur = b;
                        cur_score = sc;
                    }
                    None => break,
                }
            }
        }
        (cur, cur_score)
    }
}

impl Detector for BuiltinDetector {
    fn kind(&self) -> DetectorKind {
        DetectorKind::BuiltinTemplate
    }

    fn name(&self) -> String {
        "builtin-template".into()
    }

    fn train(&mut self, req: &TrainRequest<'_>) -> Result<ModelHandle> {
        req.validate()?;
        let mut pool = match req.init_model {
            Some(m) => TemplatePool::load(m)?,
            None => TemplatePool::default(),
        };
        let crops: Vec<Option<(u32, Vec<f32>, [f64; 2])>> = req
            .training_set
            .records
            .par_iter()
            .map(|r| {
                let img = RgbImage::load_png(&req.training_set.image_path(r))?;
                Ok(template_from_crop(&img, &r.bbox).map(|t| (r.object_id, t, [r.bbox.width(), r.bbox.height()])))
            })
            .collect::<Result<_>>()?;
        for (class, t, size) in crops.into_iter().flatten() {
            pool.classes.entry(class).or_default().push(&t, size);
        }
        for cp in pool.classes.values_mut() {
            cp.enforce_cap(self.config.pool_cap);
        }
        let handle = self.handle(&req.out_model, req.lineage());
        pool.save(&handle)?;
        Ok(handle)
    }

    fn detect(
        &mut self,
        model: &ModelHandle,
        images: &DatasetManifest,
        _manifest_path: &Path,
        conf: f64,
    ) -> Result<Vec<Detection>> {
        let pool = TemplatePool::load(model)?;
        let per_image: Vec<Vec<Detection>> = images
            .records
            .par_iter()
            .map(|r| {
                let integral = IntegralCache::get_or_load(&self.cache, &images.image_path(r))?;
                Ok(self.detect_integral(&pool, &r.image_id, &integral))
            })
            .collect::<Result<_>>()?;
        Ok(finalize(per_image.into_iter().flatten().collect(), conf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize, seed: u32) -> RgbImage {
        let mut s = seed.wrapping_mul(2_654_435_761).wrapping_add(1);
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 17;
            s ^= s << 5;
            (s % 1000) as f32 / 1000.0
        };
        // blocky noise so bilinear resampling keeps structure
        let blocks: Vec<f32> = (0..(w / 4 + 1) * (h / 4 + 1)).map(|_| next()).collect();
        RgbImage::from_fn(w, h, |x, y| {
            let v = blocks[(y / 4) * (w / 4 + 1) + x / 4];
            [v, 0.5 * v, 1.0 - v]
        })
    }

    #[test]
    fn integral_area_means_are_exact() {
        let img = textured(20, 10, 3).to_gray();
        let ii = Integral::new(&img);
        let direct: f64 = (2..7)
            .flat_map(|x| (1..4).map(move |y| (x, y)))
            .map(|(x, y)| f64::from(img.get(x, y)))
            .sum();
        let via = ii.at(7.0, 4.0) - ii.at(2.0, 4.0) - ii.at(7.0, 1.0) + ii.at(2.0, 1.0);
        assert!((direct - via).abs() < 1e-9);
        // half pixel: column 2 contributes half
        let half = ii.at(2.5, 1.0) - ii.at(2.0, 1.0) - ii.at(2.5, 0.0) + ii.at(2.0, 0.0);
        assert!((half - 0.5 * f64::from(img.get(2, 0))).abs() < 1e-9);
    }

    #[test]
    fn template_self_correlation_is_one() {
        let img = textured(64, 64, 9);
        let b = BBox::new(5.0, 7.0, 53.0, 60.0).unwrap();
        let t = template_from_crop(&img, &b).unwrap();
        assert_eq!(t.len(), TEMPLATE_SIDE * TEMPLATE_SIDE);
        assert!((ncc(&t, &t) - 1.0).abs() < 1e-6);
        let mean: f64 = t.iter().map(|&v| f64::from(v)).sum::<f64>();
        assert!(mean.abs() < 1e-4);
    }

    #[test]
    fn flat_patch_has_no_template() {
        let img = RgbImage::filled(32, 32, [0.4; 3]);
        assert!(template_from_crop(&img, &BBox::new(0.0, 0.0, 32.0, 32.0).unwrap()).is_none());
    }

    #[test]
    fn eviction_removes_duplicates_first() {
        let img = textured(200, 200, 1);
        let mut cp = ClassPool::default();
        let boxes = [(0.0, 0.0), (60.0, 10.0), (120.0, 120.0), (60.0, 10.0)];
        for (x, y) in boxes {
            let b = BBox::new(x, y, x + 70.0, y + 70.0).unwrap();
            cp.push(&template_from_crop(&img, &b).unwrap(), [70.0, 70.0]);
        }
        let original: Vec<Vec<f32>> = (0..3).map(|i| cp.template(i).to_vec()).collect();
        cp.enforce_cap(3);
        assert_eq!(cp.len(), 3);
        let kept: Vec<Vec<f32>> = (0..3).map(|i| cp.template(i).to_vec()).collect();
        assert_eq!(kept, original);
    }

    #[test]
    fn reference_size_is_median() {
        let mut cp = ClassPool::default();
        for (w, h) in [(10.0, 40.0), (30.0, 20.0), (20.0, 30.0)] {
            cp.push(&vec![0.0; TEMPLATE_SIDE * TEMPLATE_SIDE], [w, h]);
        }
        assert_eq!(cp.reference_size(), [20.0, 30.0]);
    }

    #[test]
    fn finds_trained_patch_exactly() {
        let bg = RgbImage::filled(160, 120, [0.5; 3]);
        let obj = textured(40, 52, 5);
        let mut img = bg.clone();
        for y in 0..52 {
            for x in 0..40 {
                img.set(61 + x, 37 + y, obj.get(x, y));
            }
        }
        let gt = BBox::new(61.0, 37.0, 101.0, 89.0).unwrap();
        let mut pool = TemplatePool::default();
        pool.classes
            .entry(3)
            .or_default()
            .push(&template_from_crop(&img, &gt).unwrap(), [gt.width(), gt.height()]);
        let det = BuiltinDetector::new(Path::new("unused"));
        let out = finalize(det.detect_image(&pool, "x", &img), 0.8);
        assert_eq!(out.len(), 1, "{out:?}");
        assert_eq!(out[0].class_id, 3);
        assert!(out[0].score >= 0.99, "{} {:?}", out[0].score, out[0].bbox);
        assert!(iou(&out[0].bbox, &gt) >= 0.9, "{:?}", out[0].bbox);
    }

    #[test]
    fn cached_integrals_follow_file_changes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let cache = Mutex::default();
        textured(30, 20, 1).save_png(&path).unwrap();
        let a = IntegralCache::get_or_load(&cache, &path).unwrap();
        assert!(Arc::ptr_eq(&a, &IntegralCache::get_or_load(&cache, &path).unwrap()));
        // same size, new content: the stale entry is replaced
        std::thread::sleep(std::time::Duration::from_millis(20));
        textured(30, 20, 2).save_png(&path).unwrap();
        let b = IntegralCache::get_or_load(&cache, &path).unwrap();
        assert_ne!(a.sums, b.sums);
        assert_eq!(cache.lock().unwrap().entries.len(), 1);
        assert_eq!(cache.lock().unwrap().bytes, b.sums.len() * 8);
    }
}
