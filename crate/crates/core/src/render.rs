//! Deterministic software renderer.
//!
//! A deformed sheet is projected through a pinhole camera, rasterized with a
//! z-buffer and perspective-correct bilinear texture lookup, shaded by a
//! single directional light along the optical axis, optionally covered by a
//! flat occluder patch and finally alpha-composited onto a background.
//!
//! Camera frame: `x` right, `y` down, `z` forward. The sheet frame from
//! [`crate::surface`] maps onto it with the same axis orientation, so an
//! unrotated sheet appears upright.

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{BBox, Mask, RgbImage};
use crate::seed;
use crate::surface::{mat_vec, Mesh3D};

/// Fraction of the image height spanned by the long side of an undeformed
/// sheet at the default standoff.
pub const DEFAULT_HEIGHT_FRACTION: f64 = 0.3;

/// Reference sheet height (A4 portrait) used to place the default camera.
pub const REFERENCE_SHEET_HEIGHT: f64 = 0.297;

/// Depths closer than this are treated as behind the camera.
const NEAR_PLANE: f64 = 1e-2;

/// Viewpoint relative to the object. The object is rotated about its centre
/// by roll (optical axis), pitch (`x`) and yaw (`y`), and `position` is the
/// camera displacement from its initial location.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub position: [f64; 3],
}

impl Pose {
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let (sr, cr) = self.roll.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let (sy, cy) = self.yaw.sin_cos();
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        mat_mul(&rz, &mat_mul(&rx, &ry))
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    /// Focal length in pixels.
    pub focal: f64,
    pub principal_point: [f64; 2],
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
    /// Distance from the camera to the object centre before any pose change.
    pub standoff: f64,
    pub pose: Pose,
}

impl Camera {
    /// 640x480 -> focal 800 px; other sizes scale the focal with the height.
    /// The standoff puts an undeformed A4 sheet at 30% of the image height.
    pub fn default_for(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        let focal = 800.0 * height as f64 / 480.0;
        Ok(Self {
            focal,
            principal_point: [width as f64 * 0.5, height as f64 * 0.5],
            image_size: (width, height),
            standoff: focal * REFERENCE_SHEET_HEIGHT / (DEFAULT_HEIGHT_FRACTION * height as f64),
            pose: Pose::default(),
        })
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = pose;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || self.image_size.0 == 0 || self.image_size.1 == 0 || !(self.standoff > 0.0) {
            return Err(Error::invalid(
                "camera needs focal > 0, standoff > 0 and a non-empty image",
            ));
        }
        Ok(())
    }
}

/// An object texture with its class label and physical size in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureAsset {
    pub object_id: u32,
    pub name: String,
    pub pixels: RgbImage,
    pub physical_size: (f64, f64),
}

/// A rendered object cut-out positioned in the camera frame.
///
/// `alpha` marks opaque pixels; `mask` marks pixels showing the target
/// object. The two agree until an occluder paints over part of the object.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub color: RgbImage,
    pub alpha: Vec<f32>,
    pub mask: Mask,
    /// Pixel offset of the sprite's top-left corner in the camera image.
    pub origin: (i64, i64),
}

impl Sprite {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Mean colour over object pixels.
    pub fn mean_object_value(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, p) in self.color.data.iter().enumerate() {
            if self.mask.data[i] {
                sum += f64::from(p[0] + p[1] + p[2]) / 3.0;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Rasterizes `mesh` (sheet frame) with `texture` as seen by `camera`.
///
/// The mesh is centred on its bounding-box centre and scaled by `scale`
/// about that point before the pose is applied.
pub fn render_object(
    mesh: &Mesh3D,
    texture: &TextureAsset,
    camera: &Camera,
    irradiance: f64,
    scale: f64,
) -> Result<Sprite> {
    camera.validate()?;
    if !(irradiance > 0.0 && irradiance.is_finite()) {
        return Err(Error::invalid(format!("irradiance must be positive, got {irradiance}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    if mesh.vertices.is_empty() || mesh.triangles.is_empty() {
        return Err(Error::EmptyProjection);
    }
    let nv = mesh.vertices.len() as u32;
    if mesh.triangles.iter().any(|t| t.iter().any(|&i| i >= nv)) || mesh.uv.len() != mesh.vertices.len() {
        return Err(Error::invalid("mesh has dangling indices"));
    }

    let center = mesh.bbox_center();
    let rot = camera.pose.rotation();
    let shift = [
        -camera.pose.position[0],
        -camera.pose.position[1],
        camera.standoff - camera.pose.position[2],
    ];
    let cam_pts: Vec<[f64; 3]> = mesh
        .vertices
        .iter()
        .map(|v| {
            let local = [
                (v[0] - center[0]) * scale,
                (v[1] - center[1]) * scale,
                (v[2] - center[2]) * scale,
            ];
            let r = mat_vec(&rot, local);
            [r[0] + shift[0], r[1] + shift[1], r[2] + shift[2]]
        })
        .collect();
    if cam_pts.iter().any(|p| p[2] <= NEAR_PLANE) {
        return Err(Error::EmptyProjection);
    }

    let f = camera.focal;
    let [cx, cy] = camera.principal_point;
    let screen: Vec<[f64; 2]> = cam_pts
        .iter()
        .map(|p| [f * p[0] / p[2] + cx, f * p[1] / p[2] + cy])
        .collect();

    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in &screen {
        lo_x = lo_x.min(s[0]);
        lo_y = lo_y.min(s[1]);
        hi_x = hi_x.max(s[0]);
        hi_y = hi_y.max(s[1]);
    }
    let ox = lo_x.floor() as i64;
    let oy = lo_y.floor() as i64;
    let sw = (hi_x.ceil() as i64 - ox).max(1) as usize;
    let sh = (hi_y.ceil() as i64 - oy).max(1) as usize;
    let (img_w, img_h) = camera.image_size;
    if sw > img_w || sh > img_h {
        return Err(Error::PlacementImpossible {
            sprite_w: sw,
            sprite_h: sh,
            bg_w: img_w,
            bg_h: img_h,
        });
    }

    let mut color = RgbImage::new(sw, sh);
    let mut alpha = vec![0.0f32; sw * sh];
    let mut mask = Mask::new(sw, sh);
    let mut depth = vec![f64::INFINITY; sw * sh];
    let irr = irradiance as f32;

    for tri in &mesh.triangles {
        let [a, b, c] = tri.map(|i| i as usize);
        let (pa, pb, pc) = (cam_pts[a], cam_pts[b], cam_pts[c]);
        // face normal turned towards the viewer; light travels along +z
        let u = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
        let v = [pc[0] - pa[0], pc[1] - pa[1], pc[2] - pa[2]];
        let mut n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len == 0.0 {
            continue;
        }
        n = [n[0] / len, n[1] / len, n[2] / len];
        if n[0] * pa[0] + n[1] * pa[1] + n[2] * pa[2] > 0.0 {
            n = [-n[0], -n[1], -n[2]];
        }
        let shade = (-n[2]).max(0.0) as f32;

        let (sa, sb, sc) = (screen[a], screen[b], screen[c]);
        let area = (sb[0] - sa[0]) * (sc[1] - sa[1]) - (sb[1] - sa[1]) * (sc[0] - sa[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let inv_z = [1.0 / pa[2], 1.0 / pb[2], 1.0 / pc[2]];
        let uvs = [mesh.uv[a], mesh.uv[b], mesh.uv[c]];

        let x_start = ((sa[0].min(sb[0]).min(sc[0]) - 0.5).ceil() as i64 - ox).max(0);
        let x_end = ((sa[0].max(sb[0]).max(sc[0]) - 0.5).floor() as i64 - ox).min(sw as i64 - 1);
        let y_start = ((sa[1].min(sb[1]).min(sc[1]) - 0.5).ceil() as i64 - oy).max(0);
        let y_end = ((sa[1].max(sb[1]).max(sc[1]) - 0.5).floor() as i64 - oy).min(sh as i64 - 1);
        for py in y_start..=y_end {
            let y = (py + oy) as f64 + 0.5;
            for px in x_start..=x_end {
                let x = (px + ox) as f64 + 0.5;
                let w0 = ((sb[0] - x) * (sc[1] - y) - (sb[1] - y) * (sc[0] - x)) / area;
                let w1 = ((sc[0] - x) * (sa[1] - y) - (sc[1] - y) * (sa[0] - x)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let iz = w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2];
                let z = 1.0 / iz;
                let idx = py as usize * sw + px as usize;
                if z >= depth[idx] {
                    continue;
                }
                depth[idx] = z;
                let tu = (w0 * uvs[0][0] * inv_z[0] + w1 * uvs[1][0] * inv_z[1] + w2 * uvs[2][0] * inv_z[2]) * z;
                let tv = (w0 * uvs[0][1] * inv_z[0] + w1 * uvs[1][1] * inv_z[1] + w2 * uvs[2][1] * inv_z[2]) * z;
                let tex = texture.pixels.sample_uv(tu, tv);
                color.data[idx] = tex.map(|t| (t * irr * shade).clamp(0.0, 1.0));
                alpha[idx] = 1.0;
                mask.data[idx] = true;
            }
        }
    }

    if mask.count() == 0 {
        return Err(Error::EmptyProjection);
    }
    Ok(Sprite {
        color,
        alpha,
        mask,
        origin: (ox, oy),
    })
}

/// Paints a flat rectangular occluder over part of the object.
///
/// The patch's aspect ratio is drawn from `[0.5, 2]` and its centre from the
/// object mask. It starts at `(1 - visibility)` of the mask area and is then
/// resized, keeping centre and aspect, to the smallest size that hides at
/// least that many object pixels, so the visible fraction tracks
/// `visibility` even when the patch overhangs the object's silhouette.
pub fn add_occluder(sprite: &Sprite, occluder: &TextureAsset, visibility: f64, rng_seed: u64) -> Result<Sprite> {
    if !(visibility > 0.0 && visibility <= 1.0) {
        return Err(Error::invalid(format!(
            "visibility must lie in (0, 1], got {visibility}"
        )));
    }
    if visibility == 1.0 {
        return Ok(sprite.clone());
    }
    let area = sprite.mask.count();
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    let target = (((1.0 - visibility) * area as f64).round() as usize).min(area - 1);
    if target == 0 {
        return Ok(sprite.clone());
    }

    let mut rng = seed::rng(rng_seed);
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let pick = rng.random_range(0..area);
    let (mx, my) = sprite
        .mask
        .data
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .nth(pick)
        .map(|(i, _)| (i % sprite.width(), i / sprite.width()))
        .expect("pick < area");
    let centre = (
        mx as f64 + rng.random_range(0.0..1.0),
        my as f64 + rng.random_range(0.0..1.0),
    );

    let base_w = ((1.0 - visibility) * area as f64 * aspect).sqrt();
    let base_h = ((1.0 - visibility) * area as f64 / aspect).sqrt();
    let rect_at = |s: f64| {
        let (hw, hh) = (base_w * s * 0.5, base_h * s * 0.5);
        (centre.0 - hw, centre.1 - hh, centre.0 + hw, centre.1 + hh)
    };
    let (sw, sh) = (sprite.width(), sprite.height());
    let pixel_span = |lo: f64, hi: f64, n: usize| {
        // pixels whose centres lie in [lo, hi)
        let a = (lo - 0.5).ceil().max(0.0) as usize;
        let b = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
        (a, b.max(a))
    };
    let covered = |s: f64| {
        let (x0, y0, x1, y1) = rect_at(s);
        let (xa, xb) = pixel_span(x0, x1, sw);
        let (ya, yb) = pixel_span(y0, y1, sh);
        let mut n = 0;
        for y in ya..yb {
            for x in xa..xb {
                n += usize::from(sprite.mask.get(x, y));
            }
        }
        n
    };

    let mut hi = 2.0 * (sw as f64 / base_w).max(sh as f64 / base_h) + 2.0;
    let mut lo = 0.0;
    if covered(1.0) >= target {
        hi = 1.0;
    } else {
        lo = 1.0;
    }
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if covered(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }

    let (x0, y0, x1, y1) = rect_at(hi);
    let (xa, xb) = pixel_span(x0, x1, sw);
    let (ya, yb) = pixel_span(y0, y1, sh);
    let mut out = sprite.clone();
    for y in ya..yb {
        for x in xa..xb {
            let u = ((x as f64 + 0.5 - x0) / (x1 - x0)).clamp(0.0, 1.0);
            let v = ((y as f64 + 0.5 - y0) / (y1 - y0)).clamp(0.0, 1.0);
            out.color.set(x, y, occluder.pixels.sample_uv(u, v));
            out.alpha[y * sw + x] = 1.0;
            out.mask.set(x, y, false);
        }
    }
    if out.mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(out)
}

/// Places `sprite` uniformly at random inside `background` and alpha-blends
/// it. Returns the composited image and the tight box of the visible object.
pub fn composite(sprite: &Sprite, background: &RgbImage, rng_seed: u64) -> Result<(RgbImage, BBox)> {
    let (sw, sh) = (sprite.width(), sprite.height());
    let (bw, bh) = (background.width, background.height);
    if sw > bw || sh > bh {
        return Err(Error::PlacementImpossible {
            sprite_w: sw,
            sprite_h: sh,
            bg_w: bw,
            bg_h: bh,
        });
    }
    let local = bbox_of_mask(&sprite.mask)?;
    let mut rng = seed::rng(rng_seed);
    let ox = rng.random_range(0..=bw - sw);
    let oy = rng.random_range(0..=bh - sh);

    let mut out = background.clone();
    for y in 0..sh {
        for x in 0..sw {
            let a = sprite.alpha[y * sw + x];
            if a <= 0.0 {
                continue;
            }
            let src = sprite.color.get(x, y);
            let dst = out.get(ox + x, oy + y);
            let mut px = [0.0; 3];
            for k in 0..3 {
                px[k] = a * src[k] + (1.0 - a) * dst[k];
            }
            out.set(ox + x, oy + y, px);
        }
    }
    Ok((out, local.translated(ox as f64, oy as f64)))
}

/// Minimal half-open box around all set pixels.
pub fn bbox_of_mask(mask: &Mask) -> Result<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(BBox {
        x0: x0 as f64,
        y0: y0 as f64,
        x1: x1 as f64,
        y1: y1 as f64,
    })
}
