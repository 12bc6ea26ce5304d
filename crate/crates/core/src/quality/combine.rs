//! Per-image scoring, the combined standardized blur score, threshold
//! sweeps and hair-occlusion flagging.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dhash, fourier_score, laplacian_score, wavelet_sharpness, GrayImage, WaveletConfig};
use crate::error::{AuditError, Result};

/// Default decision threshold on `combined_z`.
pub const DEFAULT_BLUR_THRESHOLD: f64 = -0.7;
pub const DEFAULT_HAIR_PERCENTILE: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub image_id: String,
    pub laplacian_var: f64,
    pub fourier_ratio: f64,
    pub wavelet_per: Option<f64>,
    pub wavelet_blur_extent: Option<f64>,
    pub combined_z: Option<f64>,
}

pub fn score_image(image_id: &str, g: &GrayImage, wavelet: &WaveletConfig) -> Result<QualityScore> {
    let w = wavelet_sharpness(g, wavelet)?;
    Ok(QualityScore {
        image_id: image_id.to_string(),
        laplacian_var: laplacian_score(g)?,
        fourier_ratio: fourier_score(g)?,
        wavelet_per: w.map(|s| s.per),
        wavelet_blur_extent: w.map(|s| s.blur_extent),
        combined_z: None,
    })
}

/// Decodes, scores and hashes files in parallel. The image id is the file
/// stem. Results follow the input order; a failure affects only its entry.
pub fn scan_files<P: AsRef<Path> + Sync>(paths: &[P], wavelet: &WaveletConfig) -> Vec<Result<(QualityScore, u64)>> {
    paths
        .par_iter()
        .map(|p| {
            let p = p.as_ref();
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let g = GrayImage::open(p)?;
            Ok((score_image(&id, &g, wavelet)?, dhash(&g)))
        })
        .collect()
}

/// Weights of the standardized metrics in the combined score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombineWeights {
    pub laplacian: f64,
    pub wavelet: f64,
    pub fourier: f64,
}

impl Default for CombineWeights {
    fn default() -> Self {
        Self {
            laplacian: 1.0,
            wavelet: 1.0,
            fourier: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombineOutcome {
    /// Metrics with zero variance over the eligible images. Non-empty means
    /// the combination was skipped and no `combined_z` was set.
    pub degenerate: Vec<String>,
    /// Images without wavelet edge points; they get no combined score.
    pub manual_review: Vec<String>,
}

fn population_z(values: &[f64]) -> Option<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return None;
    }
    Some(values.iter().map(|v| (v - mean) / sd).collect())
}

/// Sets `combined_z` to the weighted mean of the population z-scores of the
/// weighted metrics, over images that have a wavelet score.
pub fn combined_blur_score(scores: &mut [QualityScore], weights: &CombineWeights) -> Result<CombineOutcome> {
    let metrics: [(&str, f64, fn(&QualityScore) -> f64); 3] = [
        ("laplacian", weights.laplacian, |s| s.laplacian_var),
        ("wavelet", weights.wavelet, |s| s.wavelet_per.unwrap_or(f64::NAN)),
        ("fourier", weights.fourier, |s| s.fourier_ratio),
    ];
    let total: f64 = metrics.iter().map(|m| m.1).sum();
    if metrics.iter().any(|m| m.1 < 0.0 || !m.1.is_finite()) || total <= 0.0 {
        return Err(AuditError::Domain(
            "combination weights must be non-negative with a positive sum".into(),
        ));
    }
    for s in scores.iter_mut() {
        s.combined_z = None;
    }
    let manual_review: Vec<String> = scores
        .iter()
        .filter(|s| s.wavelet_per.is_none())
        .map(|s| s.image_id.clone())
        .collect();
    let eligible: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].wavelet_per.is_some()).collect();

    let mut combined = vec![0.0; eligible.len()];
    let mut degenerate = Vec::new();
    for (name, weight, get) in metrics {
        if weight == 0.0 {
            continue;
        }
        let values: Vec<f64> = eligible.iter().map(|&i| get(&scores[i])).collect();
        match (values.len() >= 2).then(|| population_z(&values)).flatten() {
            Some(z) => {
                for (c, z) in combined.iter_mut().zip(z) {
                    *c += weight * z;
                }
            }
            None => degenerate.push(name.to_string()),
        }
    }
    if degenerate.is_empty() {
        for (&i, c) in eligible.iter().zip(combined) {
            scores[i].combined_z = Some(c / total);
        }
    }
    Ok(CombineOutcome {
        degenerate,
        manual_review,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub frac_all_below: f64,
    /// `None` when no annotated image has a combined score.
    pub frac_annotated_blurred_below: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub points: Vec<SweepPoint>,
    /// Annotated ids without a combined score; excluded from the denominator.
    pub missing_annotated: Vec<String>,
}

/// Fractions of scored images and of annotated-blurred images whose
/// `combined_z` is strictly below each threshold.
pub fn threshold_sweep(scores: &[QualityScore], annotated_blurred: &BTreeSet<String>, grid: &[f64]) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(AuditError::Domain("threshold grid is empty".into()));
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(AuditError::Domain("threshold grid must be finite and sorted ascending".into()));
    }
    let by_id: HashMap<&str, f64> = scores
        .iter()
        .filter_map(|s| s.combined_z.map(|z| (s.image_id.as_str(), z)))
        .collect();
    let all: Vec<f64> = scores.iter().filter_map(|s| s.combined_z).collect();
    let mut annotated = Vec::new();
    let mut missing = Vec::new();
    for id in annotated_blurred {
        match by_id.get(id.as_str()) {
            Some(&z) => annotated.push(z),
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        tracing::warn!(ids = ?missing, "annotated blurred images without a combined score are excluded");
    }
    let frac = |v: &[f64], t: f64| v.iter().filter(|&&z| z < t).count() as f64 / v.len() as f64;
    let points = grid
        .iter()
        .map(|&t| SweepPoint {
            threshold: t,
            frac_all_below: if all.is_empty() { 0.0 } else { frac(&all, t) },
            frac_annotated_blurred_below: (!annotated.is_empty()).then(|| frac(&annotated, t)),
        })
        .collect();
    Ok(Sweep {
        points,
        missing_annotated: missing,
    })
}

/// Linear-interpolation percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Ids whose `fourier_ratio` is at or above the given percentile, in input
/// order.
pub fn hair_flag(scores: &[QualityScore], pct: f64) -> Result<Vec<String>> {
    if scores.is_empty() {
        return Err(AuditError::Domain("no scores to flag".into()));
    }
    if !(pct > 0.0 && pct < 100.0) {
        return Err(AuditError::Domain(format!("percentile {pct} outside (0, 100)")));
    }
    let ratios: Vec<f64> = scores.iter().map(|s| s.fourier_ratio).collect();
    let cutoff = percentile(&ratios, pct);
    Ok(scores
        .iter()
        .filter(|s| s.fourier_ratio >= cutoff)
        .map(|s| s.image_id.clone())
        .collect())
}
