//! Haar-wavelet edge-sharpness analysis.
//!
//! The image is decomposed three times with a Haar transform whose
//! approximation band is the 2×2 block mean, so every level stays on the
//! 0–255 scale and one edge threshold applies to all of them. Each level's
//! edge map is `sqrt(LH² + HL² + HH²)`. The maps are split into windows of
//! 8×8, 4×4 and 2×2 coefficients (finest to coarsest), which cover the same
//! 16×16 pixel region, and each window contributes its maximum `Emax_i`.
//!
//! A region is an edge point if any `Emax_i` exceeds the threshold. Edge
//! points whose energy decays with scale (`Emax1 > Emax2 >= Emax3`) are
//! Dirac/A-step edges; those whose energy grows (`Emax1 < Emax2 < Emax3`) or
//! peaks at the middle scale are G-step/Roof edges, and such an edge has
//! lost its fine-scale detail when `Emax1` is below the threshold.

use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{AuditError, Result};

pub const DEFAULT_EDGE_THRESHOLD: f64 = 35.0;
const LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveletConfig {
    pub edge_threshold: f64,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        Self {
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveletSharpness {
    /// Dirac/A-step share of edge points; higher is sharper.
    pub per: f64,
    /// Share of G-step/Roof points that lost their finest-scale energy.
    /// Zero when there are no G-step/Roof points.
    pub blur_extent: f64,
    pub edge_points: usize,
    pub dirac_astep: usize,
    pub roof_gstep: usize,
    pub blurred_roof_gstep: usize,
}

struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

/// One Haar step: returns the block-mean approximation and the edge map.
fn haar_step(src: &Plane) -> (Plane, Plane) {
    let (w, h) = (src.w / 2, src.h / 2);
    let mut ll = Vec::with_capacity(w * h);
    let mut edges = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let at = |dx: usize, dy: usize| src.data[(2 * y + dy) * src.w + 2 * x + dx];
            let (a, b, c, d) = (at(0, 0), at(1, 0), at(0, 1), at(1, 1));
            ll.push((a + b + c + d) / 4.0);
            let lh = (a + b - c - d) / 4.0;
            let hl = (a - b + c - d) / 4.0;
            let hh = (a - b - c + d) / 4.0;
            edges.push((lh * lh + hl * hl + hh * hh).sqrt());
        }
    }
    (Plane { w, h, data: ll }, Plane { w, h, data: edges })
}

fn window_max(map: &Plane, size: usize, wx: usize, wy: usize) -> f64 {
    let mut m = 0.0f64;
    for y in wy * size..(wy + 1) * size {
        for x in wx * size..(wx + 1) * size {
            m = m.max(map.data[y * map.w + x]);
        }
    }
    m
}

/// Returns `None` when no region qualifies as an edge point.
pub fn wavelet_sharpness(g: &GrayImage, config: &WaveletConfig) -> Result<Option<WaveletSharpness>> {
    if g.width() < 16 || g.height() < 16 {
        return Err(AuditError::Domain(format!(
            "wavelet analysis needs at least 16x16 pixels for {LEVELS} levels, got {}x{}",
            g.width(),
            g.height()
        )));
    }
    let mut current = Plane {
        w: g.width(),
        h: g.height(),
        data: g.pixels().to_vec(),
    };
    let mut maps = Vec::with_capacity(LEVELS);
    for _ in 0..LEVELS {
        let (ll, edges) = haar_step(&current);
        maps.push(edges);
        current = ll;
    }

    let coarse = &maps[LEVELS - 1];
    let (nx, ny) = (coarse.w / 2, coarse.h / 2);
    let t = config.edge_threshold;
    let mut s = WaveletSharpness {
        per: 0.0,
        blur_extent: 0.0,
        edge_points: 0,
        dirac_astep: 0,
        roof_gstep: 0,
        blurred_roof_gstep: 0,
    };
    for wy in 0..ny {
        for wx in 0..nx {
            let e1 = window_max(&maps[0], 8, wx, wy);
            let e2 = window_max(&maps[1], 4, wx, wy);
            let e3 = window_max(&maps[2], 2, wx, wy);
            if !(e1 > t || e2 > t || e3 > t) {
                continue;
            }
            s.edge_points += 1;
            if e1 > e2 && e2 >= e3 {
                s.dirac_astep += 1;
            } else if (e1 < e2 && e2 < e3) || (e2 > e1 && e2 > e3) {
                s.roof_gstep += 1;
                if e1 < t {
                    s.blurred_roof_gstep += 1;
                }
            }
        }
    }
    if s.edge_points == 0 {
        return Ok(None);
    }
    s.per = s.dirac_astep as f64 / s.edge_points as f64;
    if s.roof_gstep > 0 {
        s.blur_extent = s.blurred_roof_gstep as f64 / s.roof_gstep as f64;
    }
    Ok(Some(s))
}
