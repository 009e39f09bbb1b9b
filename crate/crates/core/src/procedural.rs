//! Seeded procedural stand-ins for object textures, backgrounds and
//! occluders, for demos and tests without a photo collection.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::dataset::{texture_from_image, AssetRegistry, Background};
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::seed;

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A cover-like texture: coloured panels, stripes and discs on a light
/// ground. Different seeds give visually unrelated patterns.
pub fn texture(rng_seed: u64, width: usize, height: usize) -> RgbImage {
    let mut rng = seed::rng(rng_seed);
    let mut img = RgbImage::filled(width, height, [0.9, 0.88, 0.85]);
    let (w, h) = (width as f64, height as f64);
    for _ in 0..10 {
        let c = random_color(&mut rng);
        let (x0, y0) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let (rw, rh) = (rng.random_range(0.1..0.5) * w, rng.random_range(0.05..0.3) * h);
        for y in (y0 as usize)..((y0 + rh).min(h) as usize) {
            for x in (x0 as usize)..((x0 + rw).min(w) as usize) {
                img.set(x, y, c);
            }
        }
    }
    for _ in 0..8 {
        let c = random_color(&mut rng);
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let r = rng.random_range(0.04..0.18) * w;
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    img.set(x, y, c);
                }
            }
        }
    }
    let (c, period, angle) = (
        random_color(&mut rng),
        rng.random_range(6.0..16.0),
        rng.random_range(0.0..3.1),
    );
    let band = rng.random_range(0.2..0.8) * h;
    let (s, co) = f64::sin_cos(angle);
    for y in (band as usize)..((band + 0.15 * h).min(h) as usize) {
        for x in 0..width {
            if ((x as f64 * co + y as f64 * s) / period).rem_euclid(1.0) < 0.5 {
                img.set(x, y, c);
            }
        }
    }
    img
}

/// Cluttered scene stand-in: a smooth colour field overlaid with random
/// boxes, discs and fine grain, so that no region is featureless.
pub fn background(rng_seed: u64, width: usize, height: usize) -> RgbImage {
    let mut rng = seed::rng(rng_seed);
    let (gx, gy) = (6usize, 5usize);
    let lattice: Vec<[f32; 3]> = (0..gx * gy)
        .map(|_| random_color(&mut rng).map(|v| 0.2 + 0.6 * v))
        .collect();
    let coarse = RgbImage {
        width: gx,
        height: gy,
        data: lattice,
    };
    let mut img = RgbImage::from_fn(width, height, |x, y| {
        coarse.sample_uv((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64)
    });
    let (w, h) = (width as f64, height as f64);
    for _ in 0..60 {
        let c = random_color(&mut rng);
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let r = rng.random_range(0.01..0.08) * w;
        let disc = rng.random_bool(0.5);
        let (x0, x1) = ((cx - r).max(0.0) as usize, ((cx + r).min(w - 1.0)) as usize);
        let (y0, y1) = ((cy - r).max(0.0) as usize, ((cy + r).min(h - 1.0)) as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if !disc || dx * dx + dy * dy <= r * r {
                    img.set(x, y, c);
                }
            }
        }
    }
    for p in &mut img.data {
        let g: f32 = rng.random_range(-0.06..0.06);
        *p = p.map(|v| (v + g).clamp(0.0, 1.0));
    }
    img
}

/// Two-tone occluder pattern.
pub fn occluder(rng_seed: u64, width: usize, height: usize) -> RgbImage {
    let mut rng = seed::rng(rng_seed);
    let (a, b) = (random_color(&mut rng), random_color(&mut rng));
    let cell = rng.random_range(4..12);
    RgbImage::from_fn(width, height, |x, y| if (x / cell + y / cell) % 2 == 0 { a } else { b })
}

/// Counts and sizes of a procedural asset set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProceduralAssets {
    pub objects: usize,
    pub backgrounds: usize,
    pub occluders: usize,
    pub image_size: (usize, usize),
    /// Texture raster size (A4 aspect by default).
    pub texture_size: (usize, usize),
}

impl Default for ProceduralAssets {
    fn default() -> Self {
        Self {
            objects: 5,
            backgrounds: 4,
            occluders: 3,
            image_size: (640, 480),
            texture_size: (210, 297),
        }
    }
}

impl ProceduralAssets {
    pub fn registry(&self, rng_seed: u64) -> AssetRegistry {
        let (tw, th) = self.texture_size;
        let (w, h) = self.image_size;
        let sub = |kind: &str, i: usize| seed::derive(rng_seed, &[kind.into(), i.into()]);
        AssetRegistry {
            textures: (0..self.objects)
                .map(|i| {
                    let id = i as u32;
                    (
                        id,
                        texture_from_image(id, format!("object{i:02}"), texture(sub("texture", i), tw, th)),
                    )
                })
                .collect(),
            backgrounds: (0..self.backgrounds)
                .map(|i| Background {
                    id: format!("background{i:02}"),
                    image: background(sub("background", i), w, h),
                })
                .collect(),
            occluders: (0..self.occluders)
                .map(|i| {
                    texture_from_image(
                        i as u32,
                        format!("occluder{i:02}"),
                        occluder(sub("occluder", i), 64, 64),
                    )
                })
                .collect(),
        }
    }

    /// Writes `textures/`, `backgrounds/` and `occluders/` PNG folders that
    /// [`AssetRegistry::load`] reads back.
    pub fn write(&self, dir: &Path, rng_seed: u64) -> Result<()> {
        let reg = self.registry(rng_seed);
        for sub in ["textures", "backgrounds", "occluders"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for t in reg.textures.values() {
            t.pixels
                .save_png(&dir.join("textures").join(format!("{}.png", t.name)))?;
        }
        for b in &reg.backgrounds {
            b.image
                .save_png(&dir.join("backgrounds").join(format!("{}.png", b.id)))?;
        }
        for o in &reg.occluders {
            o.pixels
                .save_png(&dir.join("occluders").join(format!("{}.png", o.name)))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        assert_eq!(texture(1, 30, 40), texture(1, 30, 40));
        assert_ne!(texture(1, 30, 40), texture(2, 30, 40));
    }

    #[test]
    fn written_assets_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ProceduralAssets {
            objects: 2,
            backgrounds: 1,
            occluders: 1,
            image_size: (64, 48),
            texture_size: (21, 30),
        };
        spec.write(dir.path(), 7).unwrap();
        let reg = AssetRegistry::load(
            &dir.path().join("textures"),
            &dir.path().join("backgrounds"),
            Some(&dir.path().join("occluders")),
            (64, 48),
        )
        .unwrap();
        assert_eq!(reg.object_ids(), vec![0, 1]);
        assert_eq!(reg.textures[&1].name, "object01");
        assert!((reg.textures[&0].physical_size.0 - 0.297 * 21.0 / 30.0).abs() < 1e-12);
        assert_eq!(reg.backgrounds[0].image.width, 64);
        assert_eq!(reg.occluders.len(), 1);
    }
}
