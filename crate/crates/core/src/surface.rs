//! Flat textured sheets and exactly isometric piecewise-rigid folds.
//!
//! A sheet lives in its own 2-D frame with the origin at one corner, `x`
//! along the width and `y` along the height (metres). A deformation is a set
//! of pairwise non-crossing straight rulings, each carrying a dihedral bend
//! angle. Folding splits the grid triangles along every ruling so that no
//! triangle straddles a fold, then rotates the far side of each ruling about
//! the ruling's current 3-D image. Every region between rulings moves
//! rigidly, so all edge lengths are preserved up to rounding.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Default grid resolution used by the data pipeline.
pub const DEFAULT_GRID: (usize, usize) = (30, 40);

/// Undeformed template: a regular grid over a `width` x `height` rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatSheet {
    pub width: f64,
    pub height: f64,
    pub grid_u: usize,
    pub grid_v: usize,
    /// Vertex `(i, j)` is stored at `j * grid_u + i`.
    pub uv: Vec<[f64; 2]>,
}

impl FlatSheet {
    pub fn vertex_count(&self) -> usize {
        self.grid_u * self.grid_v
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.grid_u + i
    }

    /// Position of a vertex in sheet coordinates.
    pub fn point(&self, idx: usize) -> [f64; 2] {
        let [u, v] = self.uv[idx];
        [u * self.width, v * self.height]
    }

    pub fn center(&self) -> [f64; 2] {
        [self.width * 0.5, self.height * 0.5]
    }

    /// Two counter-clockwise triangles per grid cell.
    pub fn triangles(&self) -> Vec<[u32; 3]> {
        let mut tris = Vec::with_capacity(2 * (self.grid_u - 1) * (self.grid_v - 1));
        for j in 0..self.grid_v - 1 {
            for i in 0..self.grid_u - 1 {
                let a = self.index(i, j) as u32;
                let b = self.index(i + 1, j) as u32;
                let c = self.index(i + 1, j + 1) as u32;
                let d = self.index(i, j + 1) as u32;
                tris.push([a, b, c]);
                tris.push([a, c, d]);
            }
        }
        tris
    }

    fn long_axis_is_y(&self) -> bool {
        self.height >= self.width
    }
}

pub fn make_flat_sheet(width: f64, height: f64, grid_u: usize, grid_v: usize) -> Result<FlatSheet> {
    if !(width > 0.0 && width.is_finite() && height > 0.0 && height.is_finite()) {
        return Err(Error::invalid(format!(
            "sheet dimensions must be positive, got {width} x {height}"
        )));
    }
    if grid_u < 2 || grid_v < 2 {
        return Err(Error::invalid(format!(
            "grid must be at least 2x2, got {grid_u}x{grid_v}"
        )));
    }
    let mut uv = Vec::with_capacity(grid_u * grid_v);
    for j in 0..grid_v {
        for i in 0..grid_u {
            uv.push([i as f64 / (grid_u - 1) as f64, j as f64 / (grid_v - 1) as f64]);
        }
    }
    Ok(FlatSheet {
        width,
        height,
        grid_u,
        grid_v,
        uv,
    })
}

/// A straight fold line on the sheet with its dihedral bend angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ruling {
    /// A point on the line, in sheet coordinates (metres).
    pub anchor: [f64; 2],
    /// Angle of the line direction, radians.
    pub direction: f64,
    /// Dihedral bend, radians.
    pub bend: f64,
}

impl Ruling {
    pub fn unit(&self) -> [f64; 2] {
        [self.direction.cos(), self.direction.sin()]
    }

    /// Signed distance of `p` from the line; positive on the left of the
    /// direction vector.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        let [dx, dy] = self.unit();
        dx * (p[1] - self.anchor[1]) - dy * (p[0] - self.anchor[0])
    }

    /// The part of the line inside the `width` x `height` rectangle, or
    /// `None` when it misses or only grazes a corner.
    pub fn segment(&self, width: f64, height: f64) -> Option<([f64; 2], [f64; 2])> {
        let [dx, dy] = self.unit();
        let [ax, ay] = self.anchor;
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for (p, q) in [(-dx, ax), (dx, width - ax), (-dy, ay), (dy, height - ay)] {
            if p.abs() < 1e-15 {
                if q < 0.0 {
                    return None;
                }
                continue;
            }
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
        if t1 - t0 <= 1e-12 * (width + height) {
            return None;
        }
        Some(([ax + t0 * dx, ay + t0 * dy], [ax + t1 * dx, ay + t1 * dy]))
    }
}

/// A fold configuration. `rulings` is kept in processing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationParams {
    pub rulings: Vec<Ruling>,
    pub region_count: usize,
}

impl DeformationParams {
    pub fn none() -> Self {
        Self {
            rulings: Vec::new(),
            region_count: 1,
        }
    }

    pub fn new(sheet: &FlatSheet, mut rulings: Vec<Ruling>) -> Result<Self> {
        sort_rulings(sheet, &mut rulings);
        let params = Self {
            region_count: rulings.len() + 1,
            rulings,
        };
        params.validate(sheet)?;
        Ok(params)
    }

    pub fn validate(&self, sheet: &FlatSheet) -> Result<()> {
        if self.region_count != self.rulings.len() + 1 {
            return Err(Error::invalid(format!(
                "region_count {} inconsistent with {} rulings",
                self.region_count,
                self.rulings.len()
            )));
        }
        let mut segments = Vec::with_capacity(self.rulings.len());
        for (i, r) in self.rulings.iter().enumerate() {
            if !(r.bend.abs() <= PI) {
                return Err(Error::invalid(format!("ruling {i}: |bend| > pi")));
            }
            let seg = r
                .segment(sheet.width, sheet.height)
                .ok_or_else(|| Error::invalid(format!("ruling {i} does not cross the sheet")))?;
            if let Some(j) = segments.iter().position(|s| segments_cross(*s, seg)) {
                return Err(Error::invalid(format!("rulings {j} and {i} cross")));
            }
            segments.push(seg);
        }
        Ok(())
    }
}

/// Sampling knobs for [`sample_deformation_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformConfig {
    /// Closed interval the bend angles are drawn from.
    pub bend_range: (f64, f64),
    /// Half-width of the direction spread around the short axis.
    pub direction_spread: f64,
    /// Candidate rulings drawn in total before giving up.
    pub max_attempts: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            bend_range: (-FRAC_PI_2, FRAC_PI_2),
            direction_spread: FRAC_PI_4,
            max_attempts: 1000,
        }
    }
}

pub fn sample_deformation(sheet: &FlatSheet, ruling_count: usize, rng_seed: u64) -> Result<DeformationParams> {
    sample_deformation_with(sheet, ruling_count, rng_seed, &DeformConfig::default())
}

/// Draws `ruling_count` pairwise non-crossing rulings by rejection.
///
/// Anchors are uniform over the sheet and directions cluster around the
/// short axis so that rulings cut across the long axis, like folds of a
/// magazine page. A candidate that crosses an already accepted ruling is
/// rejected; `max_attempts` bounds the total number of candidates drawn.
pub fn sample_deformation_with(
    sheet: &FlatSheet,
    ruling_count: usize,
    rng_seed: u64,
    cfg: &DeformConfig,
) -> Result<DeformationParams> {
    let (lo, hi) = cfg.bend_range;
    if !(lo <= hi && lo >= -PI && hi <= PI) {
        return Err(Error::invalid(format!("bend range [{lo}, {hi}] outside [-pi, pi]")));
    }
    let mut rng = seed::rng(rng_seed);
    let base = if sheet.long_axis_is_y() { 0.0 } else { FRAC_PI_2 };
    let mut rulings: Vec<Ruling> = Vec::with_capacity(ruling_count);
    let mut segments = Vec::with_capacity(ruling_count);
    let mut attempts = 0;
    while rulings.len() < ruling_count {
        if attempts >= cfg.max_attempts {
            return Err(Error::SamplingExhausted {
                attempts,
                what: format!("{ruling_count} non-crossing rulings"),
            });
        }
        attempts += 1;
        let anchor = [rng.random_range(0.0..sheet.width), rng.random_range(0.0..sheet.height)];
        let direction = base + cfg.direction_spread * rng.random_range(-1.0..=1.0);
        let bend = rng.random_range(lo..=hi);
        let candidate = Ruling {
            anchor,
            direction,
            bend,
        };
        let Some(seg) = candidate.segment(sheet.width, sheet.height) else {
            continue;
        };
        if segments.iter().any(|s| segments_cross(*s, seg)) {
            continue;
        }
        segments.push(seg);
        rulings.push(candidate);
    }
    sort_rulings(sheet, &mut rulings);
    Ok(DeformationParams {
        region_count: rulings.len() + 1,
        rulings,
    })
}

fn sort_rulings(sheet: &FlatSheet, rulings: &mut [Ruling]) {
    let axis = usize::from(sheet.long_axis_is_y());
    rulings.sort_by(|a, b| a.anchor[axis].total_cmp(&b.anchor[axis]));
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Proper crossing of two closed segments (shared boundary endpoints and
/// mere touching do not count). Collinear overlap counts as crossing.
pub(crate) fn segments_cross(s: ([f64; 2], [f64; 2]), t: ([f64; 2], [f64; 2])) -> bool {
    let o1 = orient(s.0, s.1, t.0);
    let o2 = orient(s.0, s.1, t.1);
    let o3 = orient(t.0, t.1, s.0);
    let o4 = orient(t.0, t.1, s.1);
    if o1 == 0.0 && o2 == 0.0 {
        // collinear: overlap test along the dominant axis
        let k = if (s.1[0] - s.0[0]).abs() >= (s.1[1] - s.0[1]).abs() {
            0
        } else {
            1
        };
        let (a0, a1) = (s.0[k].min(s.1[k]), s.0[k].max(s.1[k]));
        let (b0, b1) = (t.0[k].min(t.1[k]), t.0[k].max(t.1[k]));
        return a0.max(b0) < a1.min(b1);
    }
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

/// A deformed sheet. The first `grid_u * grid_v` vertices are the sheet's
/// grid vertices in the same order; vertices inserted along rulings follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh3D {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub uv: Vec<[f64; 2]>,
}

impl Mesh3D {
    /// The undeformed sheet at `z = 0`.
    pub fn flat(sheet: &FlatSheet) -> Self {
        let vertices = (0..sheet.vertex_count())
            .map(|i| {
                let [x, y] = sheet.point(i);
                [x, y, 0.0]
            })
            .collect();
        Self {
            vertices,
            triangles: sheet.triangles(),
            uv: sheet.uv.clone(),
        }
    }

    /// Centre of the axis-aligned bounding box.
    pub fn bbox_center(&self) -> [f64; 3] {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        [(lo[0] + hi[0]) * 0.5, (lo[1] + hi[1]) * 0.5, (lo[2] + hi[2]) * 0.5]
    }

    /// Applies `p -> R p + t` to every vertex.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let vertices = self
            .vertices
            .iter()
            .map(|v| {
                let r = mat_vec(rotation, *v);
                [r[0] + translation[0], r[1] + translation[1], r[2] + translation[2]]
            })
            .collect();
        Self {
            vertices,
            triangles: self.triangles.clone(),
            uv: self.uv.clone(),
        }
    }

    /// Wavefront OBJ text with `v`, `vt` and `f` records.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.uv {
            let _ = writeln!(out, "vt {} {}", t[0], 1.0 - t[1]);
        }
        for [a, b, c] in &self.triangles {
            let (a, b, c) = (a + 1, b + 1, c + 1);
            let _ = writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}");
        }
        out
    }
}

pub(crate) fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Rotation of `p` by `angle` about the line through `a` with unit direction `k`.
fn rotate_about(p: [f64; 3], a: [f64; 3], k: [f64; 3], cos: f64, sin: f64) -> [f64; 3] {
    let v = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let kxv = [
        k[1] * v[2] - k[2] * v[1],
        k[2] * v[0] - k[0] * v[2],
        k[0] * v[1] - k[1] * v[0],
    ];
    let kdv = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = a[i] + v[i] * cos + kxv[i] * sin + k[i] * kdv * (1.0 - cos);
    }
    out
}

/// Vertices closer than this fraction of the sheet diagonal to a ruling are
/// treated as lying on it.
const ON_LINE_EPS: f64 = 1e-8;

fn side(d: f64, eps: f64) -> i8 {
    if d > eps {
        1
    } else if d < -eps {
        -1
    } else {
        0
    }
}

struct FlatMesh {
    points: Vec<[f64; 2]>,
    triangles: Vec<[u32; 3]>,
}

impl FlatMesh {
    /// Splits every triangle that straddles `ruling` so that afterwards no
    /// triangle has vertices strictly on both sides.
    fn split_along(&mut self, ruling: &Ruling, eps: f64) {
        let dist: Vec<f64> = self.points.iter().map(|p| ruling.signed_distance(*p)).collect();
        let sides: Vec<i8> = dist.iter().map(|d| side(*d, eps)).collect();
        let mut cut_points: HashMap<(u32, u32), u32> = HashMap::new();
        let mut out = Vec::with_capacity(self.triangles.len() + 64);
        let old = std::mem::take(&mut self.triangles);
        for tri in old {
            let s = tri.map(|v| sides[v as usize]);
            let has_pos = s.contains(&1);
            let has_neg = s.contains(&-1);
            if !(has_pos && has_neg) {
                out.push(tri);
                continue;
            }
            let mut pos: Vec<u32> = Vec::with_capacity(4);
            let mut neg: Vec<u32> = Vec::with_capacity(4);
            for e in 0..3 {
                let a = tri[e];
                let b = tri[(e + 1) % 3];
                let (sa, sb) = (sides[a as usize], sides[b as usize]);
                if sa >= 0 {
                    pos.push(a);
                }
                if sa <= 0 {
                    neg.push(a);
                }
                if sa * sb < 0 {
                    let key = (a.min(b), a.max(b));
                    let idx = *cut_points.entry(key).or_insert_with(|| {
                        let (da, db) = (dist[a as usize], dist[b as usize]);
                        let t = da / (da - db);
                        let pa = self.points[a as usize];
                        let pb = self.points[b as usize];
                        self.points
                            .push([pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]);
                        (self.points.len() - 1) as u32
                    });
                    pos.push(idx);
                    neg.push(idx);
                }
            }
            for poly in [pos, neg] {
                for k in 1..poly.len() - 1 {
                    out.push([poly[0], poly[k], poly[k + 1]]);
                }
            }
        }
        self.triangles = out;
    }
}

/// Folds `sheet` along the rulings of `params`.
///
/// Rulings are processed in the sorted order stored in `params`. For each
/// ruling, the vertices strictly on the side away from the sheet centre
/// rotate by the bend angle about the ruling's current 3-D image.
pub fn apply_deformation(sheet: &FlatSheet, params: &DeformationParams) -> Result<Mesh3D> {
    params.validate(sheet)?;
    let mut rulings = params.rulings.clone();
    sort_rulings(sheet, &mut rulings);

    let eps = ON_LINE_EPS * sheet.width.hypot(sheet.height);
    let mut flat = FlatMesh {
        points: (0..sheet.vertex_count()).map(|i| sheet.point(i)).collect(),
        triangles: sheet.triangles(),
    };
    for r in &rulings {
        flat.split_along(r, eps);
    }

    let center = sheet.center();
    let fold_side: Vec<i8> = rulings
        .iter()
        .map(|r| if r.signed_distance(center) > 0.0 { -1 } else { 1 })
        .collect();

    let mut pos: Vec<[f64; 3]> = flat.points.iter().map(|p| [p[0], p[1], 0.0]).collect();
    // Current 3-D image of every ruling segment, plus its flat midpoint for
    // side tests against the other rulings.
    let mut axes: Vec<([f64; 3], [f64; 3], [f64; 2])> = rulings
        .iter()
        .map(|r| {
            let (a, b) = r.segment(sheet.width, sheet.height).expect("validated");
            (
                [a[0], a[1], 0.0],
                [b[0], b[1], 0.0],
                [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5],
            )
        })
        .collect();

    for (i, r) in rulings.iter().enumerate() {
        if r.bend == 0.0 {
            continue;
        }
        let (a, b, _) = axes[i];
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        let k = [(b[0] - a[0]) / len, (b[1] - a[1]) / len, (b[2] - a[2]) / len];
        let (sin, cos) = r.bend.sin_cos();
        for (p, flat_p) in pos.iter_mut().zip(&flat.points) {
            if side(r.signed_distance(*flat_p), eps) == fold_side[i] {
                *p = rotate_about(*p, a, k, cos, sin);
            }
        }
        for (j, axis) in axes.iter_mut().enumerate() {
            if j != i && side(r.signed_distance(axis.2), eps) == fold_side[i] {
                axis.0 = rotate_about(axis.0, a, k, cos, sin);
                axis.1 = rotate_about(axis.1, a, k, cos, sin);
            }
        }
    }

    let uv = flat
        .points
        .iter()
        .map(|p| [p[0] / sheet.width, p[1] / sheet.height])
        .collect::<Vec<_>>();
    // Grid vertices keep their exact template coordinates.
    let mut uv = uv;
    uv[..sheet.vertex_count()].copy_from_slice(&sheet.uv);
    Ok(Mesh3D {
        vertices: pos,
        triangles: flat.triangles,
        uv,
    })
}

/// Largest relative difference between a mesh edge's 3-D length and its
/// length on the flat sheet.
pub fn isometry_deviation(sheet: &FlatSheet, mesh: &Mesh3D) -> Result<f64> {
    let n = sheet.vertex_count();
    if mesh.vertices.len() != mesh.uv.len() || mesh.vertices.len() < n || mesh.uv[..n] != sheet.uv[..] {
        return Err(Error::invalid("mesh topology does not match the sheet grid"));
    }
    let nv = mesh.vertices.len() as u32;
    let mut worst: f64 = 0.0;
    for tri in &mesh.triangles {
        if tri.iter().any(|&v| v >= nv) {
            return Err(Error::invalid("triangle index out of range"));
        }
        for e in 0..3 {
            let (a, b) = (tri[e] as usize, tri[(e + 1) % 3] as usize);
            let (ua, ub) = (mesh.uv[a], mesh.uv[b]);
            let flat = ((ua[0] - ub[0]) * sheet.width).hypot((ua[1] - ub[1]) * sheet.height);
            if flat <= 0.0 {
                continue;
            }
            let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
            let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
            worst = worst.max((d - flat).abs() / flat);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a4(gu: usize, gv: usize) -> FlatSheet {
        make_flat_sheet(0.21, 0.297, gu, gv).unwrap()
    }

    #[test]
    fn minimal_grid() {
        let s = a4(2, 2);
        assert_eq!(s.vertex_count(), 4);
        assert_eq!(s.triangles().len(), 2);
        assert_eq!(s.uv, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn default_grid_edges_positive() {
        let s = a4(30, 40);
        assert_eq!(s.vertex_count(), 1200);
        let m = Mesh3D::flat(&s);
        for t in &m.triangles {
            for e in 0..3 {
                let (a, b) = (t[e] as usize, t[(e + 1) % 3] as usize);
                let (pa, pb) = (s.point(a), s.point(b));
                assert!((pa[0] - pb[0]).hypot(pa[1] - pb[1]) > 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_sheet() {
        assert!(matches!(
            make_flat_sheet(0.21, 0.297, 1, 2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            make_flat_sheet(0.0, 0.297, 2, 2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            make_flat_sheet(0.21, -1.0, 2, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_rulings() {
        let s = a4(30, 40);
        let p = sample_deformation(&s, 0, 5).unwrap();
        assert!(p.rulings.is_empty());
        assert_eq!(p.region_count, 1);
        let m = apply_deformation(&s, &p).unwrap();
        assert_eq!(m, Mesh3D::flat(&s));
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = a4(30, 40);
        let a = sample_deformation(&s, 5, 42).unwrap();
        let b = sample_deformation(&s, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_deformation(&s, 5, 43).unwrap());
    }

    #[test]
    fn exhausted_sampler_reports() {
        let s = a4(30, 40);
        let cfg = DeformConfig {
            max_attempts: 3,
            ..DeformConfig::default()
        };
        assert!(matches!(
            sample_deformation_with(&s, 8, 1, &cfg),
            Err(Error::SamplingExhausted { .. })
        ));
    }

    #[test]
    fn vertical_fold_gives_right_dihedral() {
        let s = a4(30, 40);
        let r = Ruling {
            anchor: [0.105, 0.1485],
            direction: FRAC_PI_2,
            bend: FRAC_PI_2,
        };
        let p = DeformationParams::new(&s, vec![r]).unwrap();
        let m = apply_deformation(&s, &p).unwrap();
        assert!(isometry_deviation(&s, &m).unwrap() <= 1e-9);

        let normal = |t: &[u32; 3]| {
            let [a, b, c] = t.map(|i| m.vertices[i as usize]);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            [n[0] / l, n[1] / l, n[2] / l]
        };
        let centroid_u = |t: &[u32; 3]| t.iter().map(|&i| m.uv[i as usize][0]).sum::<f64>() / 3.0;
        let left: Vec<_> = m.triangles.iter().filter(|t| centroid_u(t) < 0.5).map(normal).collect();
        let right: Vec<_> = m.triangles.iter().filter(|t| centroid_u(t) > 0.5).map(normal).collect();
        for n in left.iter().chain(&right) {
            // each half stays planar
            let reference = if left.contains(n) { left[0] } else { right[0] };
            let dot = n[0] * reference[0] + n[1] * reference[1] + n[2] * reference[2];
            assert!(dot > 1.0 - 1e-9);
        }
        let dot = left[0][0] * right[0][0] + left[0][1] * right[0][1] + left[0][2] * right[0][2];
        assert!((dot.clamp(-1.0, 1.0).acos() - FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn two_rulings_three_planar_regions() {
        let s = a4(30, 40);
        let p = sample_deformation(&s, 2, 11).unwrap();
        assert_eq!(p.region_count, 3);
        let m = apply_deformation(&s, &p).unwrap();
        assert!(isometry_deviation(&s, &m).unwrap() <= 1e-9);
        // region label per triangle from the sides of its flat centroid
        let mut normals: HashMap<Vec<i8>, Vec<[f64; 3]>> = HashMap::new();
        for t in &m.triangles {
            let c = t.iter().fold([0.0, 0.0], |acc, &i| {
                let uv = m.uv[i as usize];
                [acc[0] + uv[0] * s.width / 3.0, acc[1] + uv[1] * s.height / 3.0]
            });
            let key: Vec<i8> = p.rulings.iter().map(|r| side(r.signed_distance(c), 0.0)).collect();
            let [a, b, cc] = t.map(|i| m.vertices[i as usize]);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [cc[0] - a[0], cc[1] - a[1], cc[2] - a[2]];
            let n = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            normals.entry(key).or_default().push([n[0] / l, n[1] / l, n[2] / l]);
        }
        assert_eq!(normals.len(), 3);
        for ns in normals.values() {
            for n in ns {
                let d = n[0] * ns[0][0] + n[1] * ns[0][1] + n[2] * ns[0][2];
                assert!(d > 1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn deviation_of_rigid_motion_is_zero() {
        let s = a4(10, 12);
        let m = Mesh3D::flat(&s);
        assert!(isometry_deviation(&s, &m).unwrap() < 1e-12);
        let (sa, ca) = 0.7f64.sin_cos();
        let rot = [[ca, -sa, 0.0], [sa * 0.6, ca * 0.6, -0.8], [sa * 0.8, ca * 0.8, 0.6]];
        let moved = m.transformed(&rot, [1.0, -2.0, 3.5]);
        assert!(isometry_deviation(&s, &moved).unwrap() < 1e-12);
    }

    #[test]
    fn deviation_detects_displacement() {
        // 10 mm edges; move the centre vertex by 1 mm
        let s = make_flat_sheet(0.02, 0.02, 3, 3).unwrap();
        let mut m = Mesh3D::flat(&s);
        m.vertices[4][0] += 0.001;
        let d = isometry_deviation(&s, &m).unwrap();
        // the edge to the right neighbour shrinks from 10 mm to 9 mm
        assert!(d >= 0.05, "{d}");
        assert!((d - 0.1).abs() < 1e-9);
    }

    #[test]
    fn deviation_rejects_foreign_mesh() {
        let s = a4(3, 3);
        let other = Mesh3D::flat(&a4(4, 3));
        assert!(matches!(isometry_deviation(&s, &other), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn crossing_rulings_rejected() {
        let s = a4(5, 5);
        let r1 = Ruling {
            anchor: [0.105, 0.15],
            direction: 0.3,
            bend: 0.1,
        };
        let r2 = Ruling {
            anchor: [0.105, 0.15],
            direction: -0.3,
            bend: 0.1,
        };
        assert!(DeformationParams::new(&s, vec![r1, r2]).is_err());
    }

    #[test]
    fn obj_export_counts() {
        let s = a4(2, 2);
        let obj = Mesh3D::flat(&s).to_obj();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 4);
        assert_eq!(obj.lines().filter(|l| l.starts_with("vt ")).count(), 4);
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 2);
    }
}
