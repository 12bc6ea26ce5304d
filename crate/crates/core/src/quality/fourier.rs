use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::GrayImage;
use crate::error::{AuditError, Result};

/// Fraction of a bin's magnitude relative to the spectral peak above which
/// the bin counts as carrying energy.
pub const MAGNITUDE_FRACTION: f64 = 1e-3;

/// Magnitude spectrum of the 2-D DFT, row-major.
pub fn magnitude_spectrum(g: &GrayImage) -> Vec<f64> {
    let (w, h) = (g.width(), g.height());
    let mut data: Vec<Complex<f64>> = g.pixels().iter().map(|&p| Complex::new(p, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    data.iter().map(|c| c.norm()).collect()
}

/// Share of frequency bins whose magnitude exceeds 1/1000 of the largest
/// magnitude. Sharp or textured images spread energy over many bins.
pub fn fourier_score(g: &GrayImage) -> Result<f64> {
    if g.width() < 8 || g.height() < 8 {
        return Err(AuditError::Domain(format!(
            "Fourier score needs at least 8x8 pixels, got {}x{}",
            g.width(),
            g.height()
        )));
    }
    let mags = magnitude_spectrum(g);
    let max = mags.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0.0);
    }
    let cutoff = max * MAGNITUDE_FRACTION;
    let count = mags.iter().filter(|&&m| m > cutoff).count();
    Ok(count as f64 / mags.len() as f64)
}
