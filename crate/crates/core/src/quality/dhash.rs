//! 64-bit difference hash for near-duplicate detection.

use serde::{Deserialize, Serialize};

use super::GrayImage;

const HASH_W: usize = 9;
const HASH_H: usize = 8;

/// Area-average resample to `w`×`h`; each output cell is the mean of the
/// source area it covers, with fractional pixel weights at the edges.
pub fn area_resize(g: &GrayImage, w: usize, h: usize) -> Vec<f64> {
    let sx = g.width() as f64 / w as f64;
    let sy = g.height() as f64 / h as f64;
    let spans = |i: usize, scale: f64, limit: usize| -> Vec<(usize, f64)> {
        let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
        let mut out = Vec::new();
        let mut p = a.floor() as usize;
        while (p as f64) < b && p < limit {
            let cover = (b.min(p as f64 + 1.0) - a.max(p as f64)).max(0.0);
            if cover > 0.0 {
                out.push((p, cover));
            }
            p += 1;
        }
        out
    };
    let xs: Vec<_> = (0..w).map(|i| spans(i, sx, g.width())).collect();
    let mut out = Vec::with_capacity(w * h);
    for oy in 0..h {
        let ys = spans(oy, sy, g.height());
        for x_span in &xs {
            let (mut sum, mut area) = (0.0, 0.0);
            for &(y, wy) in &ys {
                for &(x, wx) in x_span {
                    sum += g.get(x, y) * wx * wy;
                    area += wx * wy;
                }
            }
            out.push(sum / area);
        }
    }
    out
}

/// Bit `8·row + col` is set when the downsampled pixel right of `col` is
/// brighter than the one at `col`.
pub fn dhash(g: &GrayImage) -> u64 {
    let small = area_resize(g, HASH_W, HASH_H);
    let mut hash = 0u64;
    for y in 0..HASH_H {
        for x in 0..HASH_W - 1 {
            if small[y * HASH_W + x + 1] > small[y * HASH_W + x] {
                hash |= 1 << (y * (HASH_W - 1) + x);
            }
        }
    }
    hash
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicatePair {
    pub a: String,
    pub b: String,
    pub distance: u32,
}

/// Pairs with Hamming distance at most `max_distance` (clamped to 64),
/// ordered by distance and then by input position.
pub fn find_duplicates(images: &[(String, GrayImage)], max_distance: u32) -> Vec<DuplicatePair> {
    let hashes: Vec<(String, u64)> = images.iter().map(|(id, g)| (id.clone(), dhash(g))).collect();
    duplicate_pairs(&hashes, max_distance)
}

/// As [`find_duplicates`], over precomputed hashes.
pub fn duplicate_pairs(hashes: &[(String, u64)], max_distance: u32) -> Vec<DuplicatePair> {
    let max_distance = max_distance.min(64);
    let mut pairs = Vec::new();
    for i in 0..hashes.len() {
        for j in i + 1..hashes.len() {
            let d = (hashes[i].1 ^ hashes[j].1).count_ones();
            if d <= max_distance {
                pairs.push(DuplicatePair {
                    a: hashes[i].0.clone(),
                    b: hashes[j].0.clone(),
                    distance: d,
                });
            }
        }
    }
    pairs.sort_by_key(|p| p.distance);
    pairs
}
