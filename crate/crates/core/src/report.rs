//! Report assembly and rendering shared by the command-line tool.
//!
//! Every report is a serde type whose JSON form carries full precision; the
//! text renderings print the same fields at fixed precision.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::agreement::{
    class_metrics, cohens_kappa, consensus, contingency, fleiss_kappa, rating_grid, votes_by_case, ClassMetrics,
    ContingencyTable, FleissResult, KappaResult,
};
use crate::comparison::ComparisonReport;
use crate::error::{AuditError, Result};
use crate::ingestion::{ErrorMatrix, GroundTruth, PatientMetadata, Sex};
use crate::label::ClassLabel;
use crate::permutation::{joint_error_count, PermutationTestResult};
use crate::quality::{CombineOutcome, DuplicatePair, QualityScore, Sweep};
use crate::service::RatingRecord;

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.prec$}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointErrorReport {
    pub models: Vec<String>,
    pub row_error_counts: Vec<usize>,
    pub n_images: usize,
    pub joint_error_images: Vec<String>,
    pub p_value_display: String,
    pub test: PermutationTestResult,
}

impl JointErrorReport {
    pub fn new(m: &ErrorMatrix, test: PermutationTestResult) -> Self {
        debug_assert_eq!(joint_error_count(m), test.observed_statistic);
        Self {
            models: m.models().to_vec(),
            row_error_counts: m.row_error_counts(),
            n_images: m.n_images(),
            joint_error_images: m.jointly_misclassified().into_iter().map(String::from).collect(),
            p_value_display: test.p_value_display(),
            test,
        }
    }

    pub fn render_text(&self) -> String {
        let t = &self.test;
        let mut out = String::new();
        let _ = writeln!(out, "Joint-error permutation test");
        let _ = writeln!(out, "images: {}", self.n_images);
        for (m, c) in self.models.iter().zip(&self.row_error_counts) {
            let _ = writeln!(out, "  {m}: {c} errors");
        }
        let _ = writeln!(out, "observed joint errors: {}", t.observed_statistic);
        let _ = writeln!(out, "iterations: {}  seed: {}  rng: {}", t.iterations, t.seed, t.rng);
        let _ = writeln!(out, "shuffles >= observed: {}", t.extreme_count);
        let _ = writeln!(out, "p-value: {}", self.p_value_display);
        let q = t.null_quantiles;
        let _ = writeln!(out, "null quantiles (2.5%, 50%, 97.5%): {}, {}, {}", q.q025, q.q50, q.q975);
        let _ = writeln!(out, "null histogram:");
        for (s, n) in &t.null_counts {
            let _ = writeln!(out, "  {s:>6} {n}");
        }
        out
    }
}

/// `image,group` CSV assigning cases to named groups. Groups keep
/// first-seen order.
pub fn load_groups<R: Read>(source: R) -> Result<Vec<(String, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers().map_err(|e| AuditError::parse(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image", "group"] {
        return Err(AuditError::parse(1, "expected header image,group"));
    }
    let mut groups: Vec<(String, Vec<String>)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| AuditError::parse(line, e.to_string()))?;
        let (image, group) = (&row[0], &row[1]);
        if !seen.insert(image.to_string()) {
            return Err(AuditError::Integrity(format!("image {image} assigned to more than one group")));
        }
        match groups.iter_mut().find(|(g, _)| g == group) {
            Some((_, v)) => v.push(image.to_string()),
            None => groups.push((group.to_string(), vec![image.to_string()])),
        }
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAgreement {
    pub group: String,
    pub cases: usize,
    /// Cases in the group with no ratings at all.
    pub uncovered: Vec<String>,
    pub with_consensus: usize,
    pub without_consensus: Vec<String>,
    pub table: ContingencyTable,
    pub metrics: Option<ClassMetrics>,
    pub cohen: Option<KappaResult>,
    pub fleiss: Option<FleissResult>,
    /// Why Fleiss' kappa was not computed, if it was not.
    pub fleiss_refused: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub groups: Vec<GroupAgreement>,
}

/// Per group: consensus coverage, consensus-vs-truth contingency table and
/// statistics, and Fleiss' kappa among first-pass raters.
pub fn agreement_report(
    records: &[RatingRecord],
    truth: &GroundTruth,
    groups: &[(String, Vec<String>)],
) -> Result<AgreementReport> {
    let votes: HashMap<String, Vec<_>> = votes_by_case(records).into_iter().collect();
    let mut out = Vec::new();
    for (name, cases) in groups {
        let mut uncovered = Vec::new();
        let mut without = Vec::new();
        let mut results = Vec::new();
        for case in cases {
            match votes.get(case) {
                None => uncovered.push(case.clone()),
                Some(v) => {
                    let c = consensus(case.clone(), v);
                    if c.consensus.is_some() {
                        results.push(c);
                    } else {
                        without.push(case.clone());
                    }
                }
            }
        }
        let table = contingency(&results, truth)?;
        let metrics = (table.total() > 0).then(|| class_metrics(&table)).transpose()?;
        let cohen = (table.total() > 0).then(|| cohens_kappa(&table)).transpose()?;
        let rated: Vec<String> = cases.iter().filter(|c| votes.contains_key(*c)).cloned().collect();
        let (fleiss, fleiss_refused) = match fleiss_kappa(&rating_grid(records, &rated)) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        out.push(GroupAgreement {
            group: name.clone(),
            cases: cases.len(),
            uncovered,
            with_consensus: results.len(),
            without_consensus: without,
            table,
            metrics,
            cohen,
            fleiss,
            fleiss_refused,
        });
    }
    Ok(AgreementReport { groups: out })
}

impl AgreementReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let _ = writeln!(out, "== group {} ==", g.group);
            let _ = writeln!(
                out,
                "cases: {}  consensus: {}  no consensus: {}  unrated: {}",
                g.cases,
                g.with_consensus,
                g.without_consensus.len(),
                g.uncovered.len()
            );
            if !g.uncovered.is_empty() {
                let _ = writeln!(out, "unrated cases: {}", g.uncovered.join(", "));
            }
            let _ = writeln!(out, "\ncontingency (rows = truth, columns = consensus):");
            out.push_str(&g.table.render_text());
            if let Some(m) = &g.metrics {
                let _ = writeln!(out, "\n{:<6}{:>8}{:>13}{:>13}", "class", "support", "sensitivity", "specificity");
                for s in &m.per_class {
                    let _ = writeln!(
                        out,
                        "{:<6}{:>8}{:>13}{:>13}",
                        s.label.code(),
                        s.support,
                        opt(s.sensitivity, 4),
                        opt(s.specificity, 4)
                    );
                }
                let _ = writeln!(out, "accuracy: {:.4} ({} images)", m.accuracy, m.total);
            }
            match &g.cohen {
                Some(k) if !k.degenerate => {
                    let _ = writeln!(
                        out,
                        "Cohen's kappa: {}  (p_o {:.4}, p_e {:.4})",
                        opt(k.kappa, 4),
                        k.observed_agreement,
                        k.expected_agreement
                    );
                }
                Some(_) => {
                    let _ = writeln!(out, "Cohen's kappa: degenerate (p_e = 1)");
                }
                None => {
                    let _ = writeln!(out, "Cohen's kappa: not computed (no consensus images)");
                }
            }
            match (&g.fleiss, &g.fleiss_refused) {
                (Some(f), _) => {
                    let k = match f.kappa.degenerate {
                        true => "degenerate (P_e = 1)".to_string(),
                        false => opt(f.kappa.kappa, 4),
                    };
                    let _ = writeln!(
                        out,
                        "Fleiss' kappa: {k}  ({} raters per item, {} items, {} excluded)",
                        f.raters_per_item,
                        f.included_items,
                        f.excluded_items.len()
                    );
                }
                (None, Some(why)) => {
                    let _ = writeln!(out, "Fleiss' kappa: refused: {why}");
                }
                (None, None) => {}
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub threshold: f64,
    pub scores: Vec<QualityScore>,
    pub combine: CombineOutcome,
    pub sweep: Sweep,
    pub below_threshold: Vec<String>,
    pub hair_percentile: f64,
    pub hair_flags: Vec<String>,
    pub duplicates: Vec<DuplicatePair>,
    /// Up to 50 lowest combined scores, lowest first.
    pub lowest: Vec<(String, f64)>,
    pub skipped: Vec<SkippedImage>,
}

pub const LOWEST_LISTED: usize = 50;

pub fn lowest_scores(scores: &[QualityScore], limit: usize) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = scores
        .iter()
        .filter_map(|s| s.combined_z.map(|z| (s.image_id.clone(), z)))
        .collect();
    v.sort_by(|a, b| a.1.total_cmp(&b.1));
    v.truncate(limit);
    v
}

impl QualityReport {
    /// `image,laplacian,fourier,wavelet_per,blur_extent,combined_z,flag`;
    /// `flag` joins `blurred`, `hair` and `review` with `;`.
    pub fn scores_csv(&self) -> String {
        let blurred: BTreeSet<&str> = self.below_threshold.iter().map(String::as_str).collect();
        let hair: BTreeSet<&str> = self.hair_flags.iter().map(String::as_str).collect();
        let review: BTreeSet<&str> = self.combine.manual_review.iter().map(String::as_str).collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image", "laplacian", "fourier", "wavelet_per", "blur_extent", "combined_z", "flag"])
            .expect("in-memory write");
        let num = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        for s in &self.scores {
            let id = s.image_id.as_str();
            let flags: Vec<&str> = [("blurred", &blurred), ("hair", &hair), ("review", &review)]
                .into_iter()
                .filter(|(_, set)| set.contains(id))
                .map(|(f, _)| f)
                .collect();
            w.write_record([
                id.to_string(),
                format!("{:?}", s.laplacian_var),
                format!("{:?}", s.fourier_ratio),
                num(s.wavelet_per),
                num(s.wavelet_blur_extent),
                num(s.combined_z),
                flags.join(";"),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Image quality");
        let _ = writeln!(out, "scored: {}  skipped: {}", self.scores.len(), self.skipped.len());
        for s in &self.skipped {
            let _ = writeln!(out, "  skipped {}: {}", s.path, s.reason);
        }
        if !self.combine.degenerate.is_empty() {
            let _ = writeln!(
                out,
                "combined score not computed: zero variance in {}",
                self.combine.degenerate.join(", ")
            );
        }
        let _ = writeln!(out, "no wavelet edges (manual review): {}", self.combine.manual_review.len());
        for id in &self.combine.manual_review {
            let _ = writeln!(out, "  {id}");
        }
        let _ = writeln!(
            out,
            "below threshold {:.3}: {} of {}",
            self.threshold,
            self.below_threshold.len(),
            self.scores.iter().filter(|s| s.combined_z.is_some()).count()
        );
        let _ = writeln!(out, "\n{:>10}{:>12}{:>18}", "threshold", "all below", "annotated below");
        for p in &self.sweep.points {
            let _ = writeln!(
                out,
                "{:>10.3}{:>12.4}{:>18}",
                p.threshold,
                p.frac_all_below,
                opt(p.frac_annotated_blurred_below, 4)
            );
        }
        if !self.sweep.missing_annotated.is_empty() {
            let _ = writeln!(
                out,
                "annotated images without a combined score: {}",
                self.sweep.missing_annotated.join(", ")
            );
        }
        let _ = writeln!(
            out,
            "\nhair flags (fourier ratio >= p{}): {}",
            self.hair_percentile,
            self.hair_flags.len()
        );
        for id in &self.hair_flags {
            let _ = writeln!(out, "  {id}");
        }
        out.push_str(&render_duplicates(&self.duplicates));
        let _ = writeln!(out, "\nlowest combined scores:");
        for (id, z) in &self.lowest {
            let _ = writeln!(out, "  {z:>9.4}  {id}");
        }
        out
    }
}

pub fn render_duplicates(pairs: &[DuplicatePair]) -> String {
    let mut out = format!("\nduplicate candidates: {}\n", pairs.len());
    for p in pairs {
        let _ = writeln!(out, "  {:>2}  {}  {}", p.distance, p.a, p.b);
    }
    out
}

pub fn render_comparison(r: &ComparisonReport) -> String {
    let mut out = String::new();
    let f = &r.friedman;
    let _ = writeln!(out, "Model comparison over {} blocks", r.matrix.blocks().len());
    let _ = writeln!(
        out,
        "Friedman chi2 = {:.4}, df = {}, p = {:.6}",
        f.chi2, f.degrees_of_freedom, f.p_value
    );
    let cd = &r.cd_diagram;
    let _ = writeln!(out, "Nemenyi CD (alpha {:.2}) = {:.4}", cd.alpha, cd.critical_difference);
    let _ = writeln!(out, "\n{:<20}{:>10}", "model", "avg rank");
    for m in &cd.ranks {
        let _ = writeln!(out, "{:<20}{:>10.4}", m.model, m.avg_rank);
    }
    let _ = writeln!(out, "\nsignificant pairs:");
    for p in &cd.significant_pairs {
        let _ = writeln!(out, "  {} vs {}: {:.4}", p.a, p.b, p.rank_difference);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub key: String,
    pub total: u64,
    pub counts: BTreeMap<ClassLabel, u64>,
    /// `count / total` per class.
    pub frequencies: BTreeMap<ClassLabel, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataSummary {
    pub age_bucket_years: u32,
    pub sex: Vec<GroupCounts>,
    pub age: Vec<GroupCounts>,
    pub site: Vec<GroupCounts>,
    /// Metadata rows whose image has no ground-truth label.
    pub unlabeled_metadata: usize,
}

pub const MISSING_BUCKET: &str = "missing";

fn age_bucket(age: u32, width: u32) -> String {
    let lo = age / width * width;
    format!("{lo}-{}", lo + width - 1)
}

/// Per-class counts of labelled images grouped by sex, age bucket and
/// site. Images without metadata, or with a field missing, go to the
/// `missing` bucket of that grouping.
pub fn metadata_summary(meta: &[PatientMetadata], truth: &GroundTruth, bucket_years: u32) -> Result<MetadataSummary> {
    if bucket_years == 0 {
        return Err(AuditError::Domain("age bucket width must be positive".into()));
    }
    let by_image: HashMap<&str, &PatientMetadata> = meta.iter().map(|m| (m.image_id.as_str(), m)).collect();
    let unlabeled_metadata = meta.iter().filter(|m| truth.get(&m.image_id).is_none()).count();
    // Buckets sort by key; numeric age buckets by their lower bound.
    let mut sex: BTreeMap<(u32, String), BTreeMap<ClassLabel, u64>> = BTreeMap::new();
    let mut age: BTreeMap<(u32, String), BTreeMap<ClassLabel, u64>> = BTreeMap::new();
    let mut site: BTreeMap<(u32, String), BTreeMap<ClassLabel, u64>> = BTreeMap::new();
    let missing = || (u32::MAX, MISSING_BUCKET.to_string());
    for (image, label) in truth.iter() {
        let m = by_image.get(image);
        let s = match m.and_then(|m| m.sex) {
            Some(Sex::Male) => (0, "male".to_string()),
            Some(Sex::Female) => (1, "female".to_string()),
            None => missing(),
        };
        let a = match m.and_then(|m| m.age) {
            Some(a) => (a / bucket_years, age_bucket(a, bucket_years)),
            None => missing(),
        };
        let t = match m.and_then(|m| m.site.clone()) {
            Some(site) => (0, site),
            None => missing(),
        };
        *sex.entry(s).or_default().entry(label).or_insert(0) += 1;
        *age.entry(a).or_default().entry(label).or_insert(0) += 1;
        *site.entry(t).or_default().entry(label).or_insert(0) += 1;
    }
    let finish = |m: BTreeMap<(u32, String), BTreeMap<ClassLabel, u64>>| -> Vec<GroupCounts> {
        m.into_iter()
            .map(|((_, key), counts)| {
                let total: u64 = counts.values().sum();
                let frequencies = counts.iter().map(|(&c, &n)| (c, n as f64 / total as f64)).collect();
                GroupCounts {
                    key,
                    total,
                    counts,
                    frequencies,
                }
            })
            .collect()
    };
    Ok(MetadataSummary {
        age_bucket_years: bucket_years,
        sex: finish(sex),
        age: finish(age),
        site: finish(site),
        unlabeled_metadata,
    })
}

impl MetadataSummary {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (title, groups) in [
            ("sex", &self.sex),
            ("age", &self.age),
            ("site", &self.site),
        ] {
            let _ = write!(out, "== by {title} ==\n{:<16}{:>7}", "group", "total");
            for c in ClassLabel::ALL {
                let _ = write!(out, "{:>8}", c.code());
            }
            out.push('\n');
            for g in groups {
                let _ = write!(out, "{:<16}{:>7}", g.key, g.total);
                for c in ClassLabel::ALL {
                    let _ = write!(out, "{:>8.4}", g.frequencies.get(&c).copied().unwrap_or(0.0));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        if self.unlabeled_metadata > 0 {
            let _ = writeln!(out, "metadata rows without a label: {}", self.unlabeled_metadata);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(pairs: &[(&str, ClassLabel)]) -> GroundTruth {
        pairs.iter().map(|&(i, l)| (i.to_string(), l)).collect()
    }

    fn meta(id: &str, age: Option<u32>, sex: Option<Sex>) -> PatientMetadata {
        PatientMetadata {
            image_id: id.into(),
            age,
            sex,
            site: None,
        }
    }

    #[test]
    fn age_bucket_frequencies() {
        let t = truth(&[("a", ClassLabel::Mel), ("b", ClassLabel::Nv)]);
        let m = vec![meta("a", Some(60), Some(Sex::Male)), meta("b", Some(60), Some(Sex::Male))];
        let s = metadata_summary(&m, &t, 5).unwrap();
        assert_eq!(s.age.len(), 1);
        assert_eq!(s.age[0].key, "60-64");
        assert_eq!(s.age[0].frequencies[&ClassLabel::Mel], 0.5);
        assert_eq!(s.age[0].frequencies[&ClassLabel::Nv], 0.5);
        assert_eq!(s.sex.iter().map(|g| g.key.as_str()).collect::<Vec<_>>(), vec!["male"]);
    }

    #[test]
    fn missing_metadata_bucket() {
        let t = truth(&[("a", ClassLabel::Mel), ("b", ClassLabel::Nv)]);
        let s = metadata_summary(&[meta("zz", Some(3), None)], &t, 5).unwrap();
        for groups in [&s.sex, &s.age, &s.site] {
            assert_eq!(groups.len(), 1);
            assert_eq!(groups[0].key, MISSING_BUCKET);
            assert_eq!(groups[0].total, 2);
        }
        assert_eq!(s.unlabeled_metadata, 1);
    }

    #[test]
    fn age_buckets_sort_numerically() {
        let t = truth(&[("a", ClassLabel::Mel), ("b", ClassLabel::Nv), ("c", ClassLabel::Nv)]);
        let m = vec![meta("a", Some(85), None), meta("b", Some(5), None), meta("c", None, None)];
        let s = metadata_summary(&m, &t, 5).unwrap();
        let keys: Vec<_> = s.age.iter().map(|g| g.key.as_str()).collect();
        assert_eq!(keys, vec!["5-9", "85-89", "missing"]);
    }

    #[test]
    fn group_manifest() {
        let g = load_groups("image,group\na,hard\nb,easy\nc,hard\n".as_bytes()).unwrap();
        assert_eq!(g, vec![("hard".into(), vec!["a".into(), "c".into()]), ("easy".into(), vec!["b".into()])]);
        assert!(load_groups("image,group\na,hard\na,easy\n".as_bytes()).is_err());
    }
}
