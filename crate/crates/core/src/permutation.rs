//! Stratified Monte Carlo permutation test for the number of images that
//! every model misclassifies.
//!
//! Each model is a stratum: its error vector is shuffled across images with
//! its error count held fixed, independently of the other models. The null
//! distribution of the joint-error count is estimated from `B` such shuffles
//! and the p-value is the plain proportion of shuffles whose statistic is at
//! least the observed one.
//!
//! Randomness: iterations are split into chunks of [`CHUNK_ITERATIONS`].
//! Chunk `c` draws from a ChaCha8 generator seeded with the user seed and set
//! to stream `c`, so the merged histogram is identical for any number of
//! worker threads. Each row shuffle is a partial Fisher–Yates pass over an
//! index array that selects `min(k, N - k)` positions.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::ingestion::ErrorMatrix;

pub const CHUNK_ITERATIONS: u64 = 4096;
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha), 64-bit seed, one stream per chunk of 4096 iterations";
/// Upper bound on the number of joint placements [`exact_null_distribution`]
/// will enumerate.
pub const EXACT_ENUMERATION_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullQuantiles {
    pub q025: u64,
    pub q50: u64,
    pub q975: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    pub observed_statistic: u64,
    pub iterations: u64,
    /// Statistic value → number of shuffles that produced it.
    pub null_counts: BTreeMap<u64, u64>,
    /// Shuffles with a statistic ≥ the observed one.
    pub extreme_count: u64,
    pub p_value: f64,
    pub null_quantiles: NullQuantiles,
    pub seed: u64,
    pub rng: String,
}

impl PermutationTestResult {
    /// `p` formatted for reports. A zero proportion is shown as `< 1/B`
    /// rather than as an exact zero.
    pub fn p_value_display(&self) -> String {
        if self.extreme_count == 0 {
            format!("< 1/{} ({:e})", self.iterations, 1.0 / self.iterations as f64)
        } else {
            format!("{:.6}", self.p_value)
        }
    }
}

/// Number of columns in which every model errs.
pub fn joint_error_count(m: &ErrorMatrix) -> u64 {
    m.jointly_misclassified().len() as u64
}

/// Smallest statistic whose cumulative frequency reaches `q`.
fn histogram_quantile(hist: &BTreeMap<u64, u64>, q: f64) -> u64 {
    let total: u64 = hist.values().sum();
    let target = q * total as f64;
    let mut acc = 0u64;
    for (&s, &n) in hist {
        acc += n;
        if acc as f64 >= target {
            return s;
        }
    }
    hist.keys().next_back().copied().unwrap_or(0)
}

pub fn null_quantiles(hist: &BTreeMap<u64, u64>) -> NullQuantiles {
    NullQuantiles {
        q025: histogram_quantile(hist, 0.025),
        q50: histogram_quantile(hist, 0.5),
        q975: histogram_quantile(hist, 0.975),
    }
}

/// Per-chunk shuffle state, reused across iterations.
struct Shuffler {
    n: usize,
    counts: Vec<usize>,
    order: Vec<usize>,
    indices: Vec<Vec<u32>>,
    acc: Vec<u64>,
    scratch: Vec<u64>,
}

impl Shuffler {
    fn new(counts: &[usize], n: usize) -> Self {
        // Rows with the fewest errors first so the running intersection
        // shrinks early.
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by_key(|&m| counts[m]);
        let words = n.div_ceil(64);
        Self {
            n,
            counts: counts.to_vec(),
            order,
            indices: counts.iter().map(|_| (0..n as u32).collect()).collect(),
            acc: vec![0; words],
            scratch: vec![0; words],
        }
    }

    fn fill_all(&mut self) {
        self.acc.fill(u64::MAX);
        let tail = self.n % 64;
        if tail != 0 {
            if let Some(last) = self.acc.last_mut() {
                *last = (1u64 << tail) - 1;
            }
        }
    }

    /// Partial Fisher–Yates: afterwards `idx[..select]` is a uniform random
    /// `select`-subset of `0..n`.
    fn partial_shuffle(idx: &mut [u32], select: usize, rng: &mut ChaCha8Rng) {
        let n = idx.len() as u32;
        for j in 0..select as u32 {
            let r = rng.random_range(j..n);
            idx.swap(j as usize, r as usize);
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng, check_rows: bool) -> u64 {
        self.fill_all();
        for oi in 0..self.order.len() {
            let m = self.order[oi];
            let k = self.counts[m];
            let n = self.n;
            if k == n {
                continue;
            }
            let select_errors = 2 * k <= n;
            let select = if select_errors { k } else { n - k };
            let idx = &mut self.indices[m];
            Self::partial_shuffle(idx, select, rng);
            let chosen = &idx[..select];
            if check_rows {
                let mut row = vec![!select_errors; n];
                for &p in chosen {
                    row[p as usize] = select_errors;
                }
                debug_assert_eq!(row.iter().filter(|&&e| e).count(), k, "row sum changed");
            }
            if select_errors {
                self.scratch.fill(0);
                for &p in chosen {
                    let (w, b) = (p as usize / 64, p % 64);
                    self.scratch[w] |= self.acc[w] & (1u64 << b);
                }
                std::mem::swap(&mut self.acc, &mut self.scratch);
            } else {
                for &p in chosen {
                    self.acc[p as usize / 64] &= !(1u64 << (p % 64));
                }
            }
        }
        self.acc.iter().map(|w| w.count_ones() as u64).sum()
    }
}

fn run_chunk(counts: &[usize], n: usize, seed: u64, chunk: u64, iterations: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    let max_stat = counts.iter().copied().min().unwrap_or(0);
    let mut hist = vec![0u64; max_stat + 1];
    let mut shuffler = Shuffler::new(counts, n);
    for it in 0..iterations {
        let s = shuffler.draw(&mut rng, cfg!(debug_assertions) && it == 0);
        hist[s as usize] += 1;
    }
    hist
}

/// Runs the stratified permutation test with `iterations` shuffles.
pub fn stratified_permutation_test(
    m: &ErrorMatrix,
    iterations: u64,
    seed: u64,
) -> Result<PermutationTestResult> {
    if iterations == 0 {
        return Err(AuditError::Domain("permutation test needs at least one iteration".into()));
    }
    if m.n_models() == 0 || m.n_images() == 0 {
        return Err(AuditError::Domain("permutation test needs a non-empty error matrix".into()));
    }
    let observed = joint_error_count(m);
    let counts = m.row_error_counts();
    let n = m.n_images();

    let chunks = iterations.div_ceil(CHUNK_ITERATIONS);
    let merged = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK_ITERATIONS.min(iterations - c * CHUNK_ITERATIONS);
            run_chunk(&counts, n, seed, c, len)
        })
        .reduce(Vec::new, |mut a, b| {
            if a.len() < b.len() {
                a.resize(b.len(), 0);
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        });

    let null_counts: BTreeMap<u64, u64> = merged
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0)
        .map(|(s, c)| (s as u64, c))
        .collect();
    let extreme_count: u64 = null_counts.range(observed..).map(|(_, c)| c).sum();
    Ok(PermutationTestResult {
        observed_statistic: observed,
        iterations,
        null_quantiles: null_quantiles(&null_counts),
        null_counts,
        extreme_count,
        p_value: extreme_count as f64 / iterations as f64,
        seed,
        rng: RNG_ALGORITHM.to_string(),
    })
}

fn binomial(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact null distribution of the joint-error count, by enumerating every
/// placement of every row's errors. Refuses instances with more than
/// [`EXACT_ENUMERATION_LIMIT`] joint placements.
pub fn exact_null_distribution(m: &ErrorMatrix) -> Result<BTreeMap<u64, f64>> {
    if m.n_models() == 0 || m.n_images() == 0 {
        return Err(AuditError::Domain("exact null needs a non-empty error matrix".into()));
    }
    let n = m.n_images();
    let counts = m.row_error_counts();
    let placements: f64 = counts.iter().map(|&k| binomial(n as u64, k as u64)).product();
    if placements > EXACT_ENUMERATION_LIMIT as f64 {
        return Err(AuditError::TooLarge {
            placements,
            bound: EXACT_ENUMERATION_LIMIT,
        });
    }

    fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut current = Vec::with_capacity(k);
        fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..=(n - (k - cur.len())) {
                cur.push(i);
                rec(i + 1, n, k, cur, out);
                cur.pop();
            }
        }
        rec(0, n, k, &mut current, &mut out);
        out
    }

    let row_sets: Vec<Vec<Vec<usize>>> = counts.iter().map(|&k| combinations(n, k)).collect();
    let mut freq: BTreeMap<u64, u64> = BTreeMap::new();

    fn walk(rows: &[Vec<Vec<usize>>], alive: &[bool], freq: &mut BTreeMap<u64, u64>) {
        match rows.split_first() {
            None => {
                *freq.entry(alive.iter().filter(|&&a| a).count() as u64).or_insert(0) += 1;
            }
            Some((sets, rest)) => {
                for set in sets {
                    let mut next = vec![false; alive.len()];
                    for &p in set {
                        next[p] = alive[p];
                    }
                    walk(rest, &next, freq);
                }
            }
        }
    }
    walk(&row_sets, &vec![true; n], &mut freq);

    let total: u64 = freq.values().sum();
    Ok(freq
        .into_iter()
        .map(|(s, c)| (s, c as f64 / total as f64))
        .collect())
}

/// Exact p-value `P(S ≥ observed)` under the null.
pub fn exact_p_value(m: &ErrorMatrix) -> Result<f64> {
    let observed = joint_error_count(m);
    Ok(exact_null_distribution(m)?.range(observed..).map(|(_, p)| p).sum())
}

/// Synthetic error-matrix generators for calibration and demonstrations.
pub mod synthetic {
    use super::*;

    /// Independent Bernoulli errors with a per-model rate. The first
    /// `forced_joint` columns are then set to errors for every model.
    pub fn planted(rates: &[f64], n_images: usize, forced_joint: usize, seed: u64) -> ErrorMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(rates.len());
        for &rate in rates {
            let row: Vec<bool> = (0..n_images)
                .map(|i| i < forced_joint || rng.random_bool(rate))
                .collect();
            rows.push(row);
        }
        ErrorMatrix::from_rows(&rows).expect("rows share a length")
    }
}
