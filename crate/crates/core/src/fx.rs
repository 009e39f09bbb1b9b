//! Whole-image degradations applied after compositing: Gaussian focus blur
//! and uniform linear motion blur. Borders replicate the edge pixels.

use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Normalized convolution kernel with odd side lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    pub width: usize,
    pub height: usize,
    /// Row-major weights.
    pub weights: Vec<f64>,
}

impl BlurKernel {
    pub fn anchor(&self) -> (usize, usize) {
        (self.width / 2, self.height / 2)
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_identity(&self) -> bool {
        self.width == 1 && self.height == 1
    }

    /// One-dimensional Gaussian of `width` taps with `sigma = width / 6`,
    /// stored as a single row.
    pub fn gaussian(width: usize) -> Self {
        let width = odd_at_least_one(width);
        if width == 1 {
            return Self::identity();
        }
        let sigma = width as f64 / 6.0;
        let c = (width / 2) as f64;
        let mut weights: Vec<f64> = (0..width)
            .map(|i| {
                let d = i as f64 - c;
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        Self {
            width,
            height: 1,
            weights,
        }
    }

    /// A rasterized segment of `length` pixels at `angle` (radians from +x
    /// towards +y), each covered cell weighted `1 / length`.
    pub fn motion(length: usize, angle: f64) -> Self {
        if length <= 1 {
            return Self::identity();
        }
        let side = odd_at_least_one(length);
        let c = (side / 2) as i64;
        let (sin, cos) = angle.sin_cos();
        let mut weights = vec![0.0; side * side];
        let step = 1.0 / length as f64;
        for t in 0..length {
            let offset = t as f64 - (length as f64 - 1.0) * 0.5;
            let dx = (offset * cos + 0.5).floor() as i64;
            let dy = (offset * sin + 0.5).floor() as i64;
            let (x, y) = ((c + dx) as usize, (c + dy) as usize);
            weights[y * side + x] += step;
        }
        Self {
            width: side,
            height: side,
            weights,
        }
    }

    fn identity() -> Self {
        Self {
            width: 1,
            height: 1,
            weights: vec![1.0],
        }
    }
}

fn odd_at_least_one(n: usize) -> usize {
    if n == 0 {
        1
    } else if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// Pixels covered by `pct` percent of the larger image side.
pub fn pct_to_pixels(pct: f64, width: usize, height: usize) -> usize {
    (pct / 100.0 * width.max(height) as f64).round() as usize
}

pub fn gaussian_kernel_for(image: &RgbImage, kernel_pct: f64) -> Result<BlurKernel> {
    if !(kernel_pct >= 0.0 && kernel_pct.is_finite()) {
        return Err(Error::invalid(format!("kernel_pct must be >= 0, got {kernel_pct}")));
    }
    Ok(BlurKernel::gaussian(pct_to_pixels(
        kernel_pct,
        image.width,
        image.height,
    )))
}

pub fn gaussian_blur(image: &RgbImage, kernel_pct: f64) -> Result<RgbImage> {
    let kernel = gaussian_kernel_for(image, kernel_pct)?;
    if kernel.is_identity() {
        return Ok(image.clone());
    }
    // separable: rows, then columns via transposition
    let rows = convolve_row(image, &kernel.weights);
    Ok(convolve_row(&rows.transpose(), &kernel.weights).transpose())
}

pub fn motion_kernel_for(image: &RgbImage, length_pct: f64, angle: f64) -> Result<BlurKernel> {
    if !(length_pct >= 0.0 && length_pct.is_finite()) {
        return Err(Error::invalid(format!("length_pct must be >= 0, got {length_pct}")));
    }
    if !(0.0..=std::f64::consts::PI).contains(&angle) {
        return Err(Error::invalid(format!("motion angle must lie in [0, pi], got {angle}")));
    }
    Ok(BlurKernel::motion(
        pct_to_pixels(length_pct, image.width, image.height),
        angle,
    ))
}

pub fn motion_blur(image: &RgbImage, length_pct: f64, angle: f64) -> Result<RgbImage> {
    let kernel = motion_kernel_for(image, length_pct, angle)?;
    if kernel.is_identity() {
        return Ok(image.clone());
    }
    Ok(convolve_sparse(image, &kernel))
}

fn convolve_row(image: &RgbImage, taps: &[f64]) -> RgbImage {
    let (w, h) = (image.width, image.height);
    let c = (taps.len() / 2) as i64;
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        let row = &image.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (k, &t) in taps.iter().enumerate() {
                let sx = (x as i64 + k as i64 - c).clamp(0, w as i64 - 1) as usize;
                let p = row[sx];
                acc[0] += t * f64::from(p[0]);
                acc[1] += t * f64::from(p[1]);
                acc[2] += t * f64::from(p[2]);
            }
            out.data[y * w + x] = acc.map(|v| v as f32);
        }
    }
    out
}

fn convolve_sparse(image: &RgbImage, kernel: &BlurKernel) -> RgbImage {
    let (w, h) = (image.width as i64, image.height as i64);
    let (ax, ay) = kernel.anchor();
    let taps: Vec<(i64, i64, f64)> = kernel
        .weights
        .iter()
        .enumerate()
        .filter(|(_, &wt)| wt != 0.0)
        .map(|(i, &wt)| {
            (
                (i % kernel.width) as i64 - ax as i64,
                (i / kernel.width) as i64 - ay as i64,
                wt,
            )
        })
        .collect();
    RgbImage::from_fn(image.width, image.height, |x, y| {
        let mut acc = [0.0f64; 3];
        for &(dx, dy, wt) in &taps {
            let sx = (x as i64 + dx).clamp(0, w - 1) as usize;
            let sy = (y as i64 + dy).clamp(0, h - 1) as usize;
            let p = image.get(sx, sy);
            acc[0] += wt * f64::from(p[0]);
            acc[1] += wt * f64::from(p[1]);
            acc[2] += wt * f64::from(p[2]);
        }
        acc.map(|v| v as f32)
    })
}
