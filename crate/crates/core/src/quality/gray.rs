use std::path::Path;

use crate::error::{AuditError, Result};

/// Row-major single-channel image with luma values on the 0–255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(AuditError::Domain(format!("image has zero dimension ({width}x{height})")));
        }
        if pixels.len() != width * height {
            return Err(AuditError::Domain(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(AuditError::Domain("non-finite pixel value".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Pixel lookup with replicate-border handling.
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Decodes a PNG or JPEG file and converts it to luma.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| AuditError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        to_gray(&img.to_rgb8())
    }
}

/// ITU-R BT.601 luma: 0.299 R + 0.587 G + 0.114 B.
pub fn to_gray(rgb: &image::RgbImage) -> Result<GrayImage> {
    let (w, h) = rgb.dimensions();
    let pixels = rgb
        .pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect();
    GrayImage::new(w as usize, h as usize, pixels)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with a ±3σ kernel and replicated borders.
/// `sigma <= 0` returns a copy.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img.get_clamped(x as isize + i as isize - r, y as isize))
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
    GrayImage {
        width: w,
        height: h,
        pixels: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_of_pure_colours() {
        let white = image::RgbImage::from_pixel(4, 3, image::Rgb([255, 255, 255]));
        let g = to_gray(&white).unwrap();
        assert!(g.pixels().iter().all(|&p| (p - 255.0).abs() < 1e-9));

        let red = image::RgbImage::from_pixel(2, 2, image::Rgb([255, 0, 0]));
        let g = to_gray(&red).unwrap();
        assert!(g.pixels().iter().all(|&p| (p - 76.245).abs() < 1e-9));
    }

    #[test]
    fn empty_raster_is_rejected() {
        let empty = image::RgbImage::new(0, 0);
        assert!(matches!(to_gray(&empty), Err(AuditError::Domain(_))));
    }

    #[test]
    fn blur_preserves_constant_and_mean() {
        let c = GrayImage::from_fn(10, 10, |_, _| 42.0).unwrap();
        let b = gaussian_blur(&c, 2.0);
        assert!(b.pixels().iter().all(|&p| (p - 42.0).abs() < 1e-9));
    }
}
