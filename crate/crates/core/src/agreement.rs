//! Consensus formation from rater votes and the agreement statistics built on
//! it: contingency tables, per-class sensitivity/specificity, Cohen's kappa
//! between consensus and ground truth, and Fleiss' kappa among raters.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::ingestion::GroundTruth;
use crate::label::{ClassLabel, Diagnosis, CLASS_COUNT};
use crate::service::{latest_revisions, RatingRecord};

/// Suffix marking a senior rater's additional tie-break pass.
pub const SECOND_PASS_SUFFIX: &str = "#pass2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub image_id: String,
    pub consensus: Option<ClassLabel>,
    pub vote_counts: BTreeMap<Diagnosis, usize>,
    /// Votes other than OTHER.
    pub valid_votes: usize,
    pub total_votes: usize,
}

/// Strict-majority consensus over the non-OTHER votes of one image.
pub fn consensus(image_id: impl Into<String>, votes: &[Diagnosis]) -> ConsensusResult {
    let mut vote_counts = BTreeMap::new();
    for v in votes {
        *vote_counts.entry(*v).or_insert(0) += 1;
    }
    let valid_votes = votes.iter().filter(|v| v.class().is_some()).count();
    let consensus = vote_counts
        .iter()
        .filter_map(|(d, &n)| d.class().map(|c| (c, n)))
        .find(|&(_, n)| 2 * n > valid_votes)
        .map(|(c, _)| c);
    ConsensusResult {
        image_id: image_id.into(),
        consensus,
        vote_counts,
        valid_votes,
        total_votes: votes.len(),
    }
}

/// Latest-revision votes grouped by case, cases in first-seen order.
pub fn votes_by_case(records: &[RatingRecord]) -> Vec<(String, Vec<Diagnosis>)> {
    let mut order: Vec<String> = Vec::new();
    let mut by_case: HashMap<&str, Vec<Diagnosis>> = HashMap::new();
    for r in latest_revisions(records) {
        by_case
            .entry(r.case_id.as_str())
            .or_insert_with(|| {
                order.push(r.case_id.clone());
                Vec::new()
            })
            .push(r.diagnosis);
    }
    order
        .into_iter()
        .map(|c| {
            let votes = by_case.remove(c.as_str()).unwrap_or_default();
            (c, votes)
        })
        .collect()
}

/// Square count grid, rows = true label, columns = assigned diagnosis, both
/// indexed by `labels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub labels: Vec<ClassLabel>,
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    /// Empty 8 × 8 table over every class.
    pub fn full() -> Self {
        Self {
            labels: ClassLabel::ALL.to_vec(),
            counts: vec![vec![0; CLASS_COUNT]; CLASS_COUNT],
        }
    }

    pub fn from_counts(labels: Vec<ClassLabel>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = labels.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(AuditError::Domain(format!("contingency table must be {k} x {k}")));
        }
        Ok(Self { labels, counts })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    fn position(&self, label: ClassLabel) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    /// Columns that contain at least one count.
    pub fn nonzero_columns(&self) -> Vec<usize> {
        (0..self.size()).filter(|&k| self.col_sum(k) > 0).collect()
    }

    /// CSV with a `label` column followed by one column per diagnosis.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l.code());
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text; diagnosis columns that are entirely zero are omitted.
    pub fn render_text(&self) -> String {
        let cols = self.nonzero_columns();
        let mut out = format!("{:<6}", "Label");
        for &c in &cols {
            let _ = write!(out, "{:>6}", self.labels[c].code());
        }
        out.push('\n');
        for (r, l) in self.labels.iter().enumerate() {
            let _ = write!(out, "{:<6}", l.code());
            for &c in &cols {
                let _ = write!(out, "{:>6}", self.counts[r][c]);
            }
            out.push('\n');
        }
        out
    }
}

/// Truth × consensus table over consensus-bearing images.
pub fn contingency(consensuses: &[ConsensusResult], truth: &GroundTruth) -> Result<ContingencyTable> {
    let mut table = ContingencyTable::full();
    let mut missing = Vec::new();
    for c in consensuses {
        let Some(diag) = c.consensus else { continue };
        match truth.get(&c.image_id) {
            Some(t) => table.counts[t.index()][diag.index()] += 1,
            None => missing.push(c.image_id.as_str()),
        }
    }
    if !missing.is_empty() {
        return Err(AuditError::Integrity(format!(
            "consensus images without ground truth: {}",
            missing.join(", ")
        )));
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub label: ClassLabel,
    pub support: u64,
    /// `None` when the class has no true instances.
    pub sensitivity: Option<f64>,
    /// `None` when every instance belongs to this class.
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassStat>,
    pub accuracy: f64,
    pub total: u64,
}

impl ClassMetrics {
    pub fn get(&self, label: ClassLabel) -> Option<&ClassStat> {
        self.per_class.iter().find(|s| s.label == label)
    }
}

pub fn class_metrics(table: &ContingencyTable) -> Result<ClassMetrics> {
    let total = table.total();
    if total == 0 {
        return Err(AuditError::Domain("class metrics of an empty contingency table".into()));
    }
    let per_class = (0..table.size())
        .map(|k| {
            let row = table.row_sum(k);
            let col = table.col_sum(k);
            let diag = table.counts[k][k];
            let negatives = total - row;
            ClassStat {
                label: table.labels[k],
                support: row,
                sensitivity: (row > 0).then(|| diag as f64 / row as f64),
                specificity: (negatives > 0)
                    .then(|| (total - row - col + diag) as f64 / negatives as f64),
            }
        })
        .collect();
    Ok(ClassMetrics {
        per_class,
        accuracy: table.trace() as f64 / total as f64,
        total,
    })
}

/// Chance-corrected agreement. `kappa` is `None` when expected agreement is
/// 1 and the statistic is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: Option<f64>,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub degenerate: bool,
}

impl KappaResult {
    fn from_agreements(observed: f64, expected: f64) -> Self {
        // Expected agreement of exactly one can only arise from a single
        // populated category; allow for rounding in the sum of squares.
        let degenerate = (1.0 - expected).abs() < 1e-12;
        Self {
            kappa: (!degenerate).then(|| (observed - expected) / (1.0 - expected)),
            observed_agreement: observed,
            expected_agreement: expected,
            degenerate,
        }
    }
}

/// Cohen's kappa of a square table whose rows and columns share labels.
pub fn cohens_kappa(table: &ContingencyTable) -> Result<KappaResult> {
    let total = table.total();
    if total == 0 {
        return Err(AuditError::Domain("Cohen's kappa of an empty table".into()));
    }
    let n = total as f64;
    let observed = table.trace() as f64 / n;
    let expected = (0..table.size())
        .map(|k| (table.row_sum(k) as f64 / n) * (table.col_sum(k) as f64 / n))
        .sum();
    Ok(KappaResult::from_agreements(observed, expected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleissResult {
    pub kappa: KappaResult,
    pub raters_per_item: u64,
    pub included_items: usize,
    /// Row indices dropped because their rating count differed from
    /// `raters_per_item`.
    pub excluded_items: Vec<usize>,
}

/// Fleiss' kappa over an items × categories count grid.
///
/// The number of raters `r` is the most common row total (the larger one on
/// ties); rows with a different total are excluded and reported.
pub fn fleiss_kappa(grid: &[Vec<u64>]) -> Result<FleissResult> {
    let mut totals: BTreeMap<u64, usize> = BTreeMap::new();
    for row in grid {
        *totals.entry(row.iter().sum()).or_insert(0) += 1;
    }
    let r = totals
        .iter()
        .max_by_key(|&(&t, &n)| (n, t))
        .map(|(&t, _)| t)
        .ok_or_else(|| AuditError::Domain("Fleiss' kappa needs at least one item".into()))?;
    if r < 2 {
        return Err(AuditError::Domain(format!(
            "Fleiss' kappa needs at least 2 ratings per item, found {r}"
        )));
    }

    let categories = grid.iter().map(Vec::len).max().unwrap_or(0);
    let mut excluded = Vec::new();
    let mut category_totals = vec![0u64; categories];
    let mut p_sum = 0.0;
    let mut n_items = 0usize;
    let rf = r as f64;
    for (i, row) in grid.iter().enumerate() {
        if row.iter().sum::<u64>() != r {
            excluded.push(i);
            continue;
        }
        n_items += 1;
        let sq: u64 = row.iter().map(|c| c * c).sum();
        p_sum += (sq as f64 - rf) / (rf * (rf - 1.0));
        for (acc, c) in category_totals.iter_mut().zip(row) {
            *acc += c;
        }
    }
    let observed = p_sum / n_items as f64;
    let denom = n_items as f64 * rf;
    let expected = category_totals.iter().map(|&c| (c as f64 / denom).powi(2)).sum();
    Ok(FleissResult {
        kappa: KappaResult::from_agreements(observed, expected),
        raters_per_item: r,
        included_items: n_items,
        excluded_items: excluded,
    })
}

/// Items × nine-category grid (eight classes plus OTHER) of the latest
/// diagnoses of first-pass raters. Second-pass identities are left out.
pub fn rating_grid(records: &[RatingRecord], cases: &[String]) -> Vec<Vec<u64>> {
    let position: HashMap<&str, usize> = cases.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut grid = vec![vec![0u64; CLASS_COUNT + 1]; cases.len()];
    for r in latest_revisions(records) {
        if r.rater_id.ends_with(SECOND_PASS_SUFFIX) {
            continue;
        }
        if let Some(&i) = position.get(r.case_id.as_str()) {
            grid[i][r.diagnosis.category_index()] += 1;
        }
    }
    grid
}

/// Applies a label permutation to both axes; used to check invariance.
pub fn relabel(table: &ContingencyTable, mapping: impl Fn(ClassLabel) -> ClassLabel) -> ContingencyTable {
    let mut out = ContingencyTable {
        labels: table.labels.clone(),
        counts: vec![vec![0; table.size()]; table.size()],
    };
    for r in 0..table.size() {
        for c in 0..table.size() {
            let nr = out.position(mapping(table.labels[r])).expect("mapping stays within labels");
            let nc = out.position(mapping(table.labels[c])).expect("mapping stays within labels");
            out.counts[nr][nc] += table.counts[r][c];
        }
    }
    out
}
