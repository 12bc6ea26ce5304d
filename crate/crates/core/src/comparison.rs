//! Ensemble aggregation, balanced accuracy and rank-based comparison of
//! models over blocks (folds, seeds or datasets).

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{AuditError, Result};
use crate::ingestion::{GroundTruth, PredictionRecord};
use crate::label::{argmax, softmax, ClassLabel, CLASS_COUNT};

/// Softmaxes each activation vector, averages element-wise and returns the
/// argmax index (lowest index on ties).
pub fn mean_prediction_index<V: AsRef<[f64]>>(activations: &[V]) -> Result<usize> {
    let first = activations
        .first()
        .ok_or_else(|| AuditError::Domain("mean prediction needs at least one model".into()))?;
    let len = first.as_ref().len();
    if len == 0 {
        return Err(AuditError::Domain("empty activation vector".into()));
    }
    let mut mean = vec![0.0; len];
    for v in activations {
        let v = v.as_ref();
        if v.len() != len {
            return Err(AuditError::Domain(format!(
                "activation length {} does not match {len}",
                v.len()
            )));
        }
        for (m, p) in mean.iter_mut().zip(softmax(v)) {
            *m += p;
        }
    }
    Ok(argmax(&mean).expect("non-empty"))
}

pub fn mean_prediction(activations: &[[f64; CLASS_COUNT]]) -> Result<ClassLabel> {
    mean_prediction_index(activations).map(|i| ClassLabel::from_index(i).expect("8 classes"))
}

/// Most frequent label. Ties go to the label with the highest mean softmax
/// activation when activations are given, then to the lowest class index.
pub fn majority_vote(predicted: &[ClassLabel], activations: Option<&[[f64; CLASS_COUNT]]>) -> Result<ClassLabel> {
    if predicted.is_empty() {
        return Err(AuditError::Domain("majority vote needs at least one vote".into()));
    }
    let mut counts = [0usize; CLASS_COUNT];
    for p in predicted {
        counts[p.index()] += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..CLASS_COUNT).filter(|&i| counts[i] == top).collect();
    if tied.len() == 1 {
        return Ok(ClassLabel::from_index(tied[0]).expect("index"));
    }
    if let Some(acts) = activations.filter(|a| !a.is_empty()) {
        let mut mean = [0.0; CLASS_COUNT];
        for a in acts {
            for (m, p) in mean.iter_mut().zip(softmax(a)) {
                *m += p / acts.len() as f64;
            }
        }
        let scores: Vec<f64> = tied.iter().map(|&i| mean[i]).collect();
        return Ok(ClassLabel::from_index(tied[argmax(&scores).expect("non-empty")]).expect("index"));
    }
    Ok(ClassLabel::from_index(tied[0]).expect("index"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub value: f64,
    /// Per-class recall for classes present in the truth labels.
    pub recalls: BTreeMap<ClassLabel, f64>,
    /// Classes with no truth instances, left out of the mean.
    pub excluded: Vec<ClassLabel>,
}

pub fn balanced_accuracy(pred: &[ClassLabel], truth: &[ClassLabel]) -> Result<BalancedAccuracy> {
    if pred.len() != truth.len() {
        return Err(AuditError::Domain(format!(
            "{} predictions for {} truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(AuditError::Domain("balanced accuracy of an empty set".into()));
    }
    let mut support = [0u64; CLASS_COUNT];
    let mut hits = [0u64; CLASS_COUNT];
    for (p, t) in pred.iter().zip(truth) {
        support[t.index()] += 1;
        if p == t {
            hits[t.index()] += 1;
        }
    }
    let mut recalls = BTreeMap::new();
    let mut excluded = Vec::new();
    for c in ClassLabel::ALL {
        match support[c.index()] {
            0 => excluded.push(c),
            s => {
                recalls.insert(c, hits[c.index()] as f64 / s as f64);
            }
        }
    }
    if !excluded.is_empty() {
        tracing::warn!(classes = ?excluded, "classes without truth instances excluded from balanced accuracy");
    }
    Ok(BalancedAccuracy {
        value: recalls.values().sum::<f64>() / recalls.len() as f64,
        recalls,
        excluded,
    })
}

/// Performance values of k models over n blocks; higher is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMatrix {
    models: Vec<String>,
    blocks: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl MetricMatrix {
    /// `values[model][block]`.
    pub fn new(models: Vec<String>, blocks: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != models.len() || values.iter().any(|r| r.len() != blocks.len()) {
            return Err(AuditError::Domain(format!(
                "metric grid shape does not match {} models x {} blocks",
                models.len(),
                blocks.len()
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AuditError::Domain("non-finite metric value".into()));
        }
        Ok(Self { models, blocks, values })
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn blocks(&self) -> &[String] {
        &self.blocks
    }

    pub fn value(&self, model: usize, block: usize) -> f64 {
        self.values[model][block]
    }

    /// Long-format CSV `model,block,value`. Models and blocks keep first-seen
    /// order; every pair must appear exactly once.
    pub fn from_csv<R: Read>(source: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let headers = rdr.headers().map_err(|e| AuditError::parse(1, e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["model", "block", "value"] {
            return Err(AuditError::parse(1, "expected header model,block,value"));
        }
        let mut models: Vec<String> = Vec::new();
        let mut blocks: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, row) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let row = row.map_err(|e| AuditError::parse(line, e.to_string()))?;
            let value: f64 = row[2]
                .parse()
                .map_err(|_| AuditError::parse(line, format!("bad value {:?}", &row[2])))?;
            let idx = |list: &mut Vec<String>, s: &str| match list.iter().position(|m| m == s) {
                Some(p) => p,
                None => {
                    list.push(s.to_string());
                    list.len() - 1
                }
            };
            let key = (idx(&mut models, &row[0]), idx(&mut blocks, &row[1]));
            if cells.insert(key, value).is_some() {
                return Err(AuditError::Integrity(format!("duplicate cell ({}, {})", &row[0], &row[1])));
            }
        }
        let mut values = vec![vec![f64::NAN; blocks.len()]; models.len()];
        for ((m, b), v) in cells {
            values[m][b] = v;
        }
        let missing = values.iter().flatten().filter(|v| v.is_nan()).count();
        if missing > 0 {
            return Err(AuditError::Integrity(format!("{missing} missing model/block cells")));
        }
        Self::new(models, blocks, values)
    }
}

/// Balanced accuracy of every model on every fold, plus mean-prediction
/// (`MP`) and majority-vote (`MV`) ensembles over all models per fold.
/// Images without a prediction from every model are left out of the
/// ensembles.
pub fn fold_metric_matrix(preds: &[PredictionRecord], truth: &GroundTruth) -> Result<MetricMatrix> {
    let mut models: Vec<String> = Vec::new();
    let mut folds: Vec<u8> = Vec::new();
    // (fold, image) -> per-model activations
    let mut by_image: BTreeMap<(u8, &str), BTreeMap<usize, [f64; CLASS_COUNT]>> = BTreeMap::new();
    let mut per_model: BTreeMap<(usize, u8), (Vec<ClassLabel>, Vec<ClassLabel>)> = BTreeMap::new();
    for p in preds {
        let m = match models.iter().position(|x| *x == p.model_id) {
            Some(m) => m,
            None => {
                models.push(p.model_id.clone());
                models.len() - 1
            }
        };
        if !folds.contains(&p.fold_id) {
            folds.push(p.fold_id);
        }
        let t = truth
            .get(&p.image_id)
            .ok_or_else(|| AuditError::Integrity(format!("no ground truth for image {}", p.image_id)))?;
        let e = per_model.entry((m, p.fold_id)).or_default();
        e.0.push(p.predicted());
        e.1.push(t);
        by_image.entry((p.fold_id, p.image_id.as_str())).or_default().insert(m, p.activations);
    }
    folds.sort_unstable();
    let mut values = vec![vec![f64::NAN; folds.len()]; models.len() + 2];
    for ((m, fold), (pred, tr)) in &per_model {
        let b = folds.iter().position(|f| f == fold).expect("fold");
        values[*m][b] = balanced_accuracy(pred, tr)?.value;
    }
    let k = models.len();
    for (b, &fold) in folds.iter().enumerate() {
        let (mut mp, mut mv, mut tr) = (Vec::new(), Vec::new(), Vec::new());
        for ((_, image), acts) in by_image.range((fold, "")..).take_while(|((f, _), _)| *f == fold) {
            if acts.len() != k {
                continue;
            }
            let acts: Vec<[f64; CLASS_COUNT]> = acts.values().copied().collect();
            let votes: Vec<ClassLabel> = acts
                .iter()
                .map(|a| ClassLabel::from_index(argmax(a).expect("8")).expect("index"))
                .collect();
            mp.push(mean_prediction(&acts)?);
            mv.push(majority_vote(&votes, Some(&acts))?);
            tr.push(truth.get(image).expect("checked"));
        }
        if !tr.is_empty() {
            values[k][b] = balanced_accuracy(&mp, &tr)?.value;
            values[k + 1][b] = balanced_accuracy(&mv, &tr)?.value;
        }
    }
    let missing: Vec<String> = values
        .iter()
        .enumerate()
        .flat_map(|(m, row)| row.iter().enumerate().filter(|(_, v)| v.is_nan()).map(move |(b, _)| (m, b)))
        .map(|(m, b)| format!("{}@fold{}", models.get(m).map(String::as_str).unwrap_or("ensemble"), folds[b]))
        .collect();
    if !missing.is_empty() {
        return Err(AuditError::Integrity(format!("missing fold results: {}", missing.join(", "))));
    }
    models.push("MP".into());
    models.push("MV".into());
    MetricMatrix::new(models, folds.iter().map(|f| format!("fold{f}")).collect(), values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub avg_ranks: Vec<f64>,
}

/// Ranks within one block: 1 for the best value, average ranks on ties.
pub fn rank_block(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn friedman_test(m: &MetricMatrix) -> Result<FriedmanResult> {
    let k = m.models.len();
    let n = m.blocks.len();
    if k < 2 || n < 2 {
        return Err(AuditError::Domain(format!(
            "Friedman test needs at least 2 models and 2 blocks, got {k} x {n}"
        )));
    }
    let mut rank_sums = vec![0.0; k];
    for b in 0..n {
        let block: Vec<f64> = (0..k).map(|j| m.values[j][b]).collect();
        for (s, r) in rank_sums.iter_mut().zip(rank_block(&block)) {
            *s += r;
        }
    }
    let (kf, nf) = (k as f64, n as f64);
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let chi2 = (12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0)).max(0.0);
    let df = k - 1;
    let dist = ChiSquared::new(df as f64).expect("df >= 1");
    Ok(FriedmanResult {
        chi2,
        degrees_of_freedom: df,
        p_value: dist.sf(chi2).clamp(0.0, 1.0),
        avg_ranks: rank_sums.iter().map(|r| r / nf).collect(),
    })
}

/// Nemenyi critical values q_α for k = 2..=10 models (studentized range
/// statistic divided by √2).
const Q_05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];
const Q_10: [f64; 9] = [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alpha {
    #[serde(rename = "0.05")]
    P05,
    #[serde(rename = "0.10")]
    P10,
}

impl Alpha {
    pub fn from_f64(a: f64) -> Result<Self> {
        if (a - 0.05).abs() < 1e-12 {
            Ok(Alpha::P05)
        } else if (a - 0.10).abs() < 1e-12 {
            Ok(Alpha::P10)
        } else {
            Err(AuditError::Domain(format!("alpha {a} not tabulated; use 0.05 or 0.10")))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Alpha::P05 => 0.05,
            Alpha::P10 => 0.10,
        }
    }
}

pub fn nemenyi_q(k: usize, alpha: Alpha) -> Result<f64> {
    if !(2..=10).contains(&k) {
        return Err(AuditError::Domain(format!("Nemenyi table covers 2..=10 models, got {k}")));
    }
    Ok(match alpha {
        Alpha::P05 => Q_05[k - 2],
        Alpha::P10 => Q_10[k - 2],
    })
}

/// Critical difference `q_α(k)·√(k(k+1)/(6n))`.
pub fn nemenyi_cd(k: usize, n: usize, alpha: Alpha) -> Result<f64> {
    if n == 0 {
        return Err(AuditError::Domain("Nemenyi CD needs at least one block".into()));
    }
    let q = nemenyi_q(k, alpha)?;
    let (k, n) = (k as f64, n as f64);
    Ok(q * (k * (k + 1.0) / (6.0 * n)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model: String,
    pub avg_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPair {
    pub a: String,
    pub b: String,
    pub rank_difference: f64,
}

/// Plot-ready data for a critical-difference diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdDiagram {
    pub alpha: f64,
    pub blocks: usize,
    pub critical_difference: f64,
    /// Sorted by average rank, best first.
    pub ranks: Vec<RankedModel>,
    /// Pairs with `|difference| >= CD`.
    pub significant_pairs: Vec<ModelPair>,
    /// Pairs drawn as connected (`|difference| < CD`).
    pub connected_pairs: Vec<ModelPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub matrix: MetricMatrix,
    pub friedman: FriedmanResult,
    pub cd_diagram: CdDiagram,
}

pub fn cd_diagram(avg_ranks: &[(String, f64)], blocks: usize, alpha: Alpha) -> Result<CdDiagram> {
    let cd = nemenyi_cd(avg_ranks.len(), blocks, alpha)?;
    let mut ranks: Vec<RankedModel> = avg_ranks
        .iter()
        .map(|(m, r)| RankedModel {
            model: m.clone(),
            avg_rank: *r,
        })
        .collect();
    ranks.sort_by(|a, b| a.avg_rank.total_cmp(&b.avg_rank));
    let mut significant_pairs = Vec::new();
    let mut connected_pairs = Vec::new();
    for i in 0..ranks.len() {
        for j in i + 1..ranks.len() {
            let pair = ModelPair {
                a: ranks[i].model.clone(),
                b: ranks[j].model.clone(),
                rank_difference: ranks[j].avg_rank - ranks[i].avg_rank,
            };
            if pair.rank_difference.abs() >= cd {
                significant_pairs.push(pair);
            } else {
                connected_pairs.push(pair);
            }
        }
    }
    Ok(CdDiagram {
        alpha: alpha.value(),
        blocks,
        critical_difference: cd,
        ranks,
        significant_pairs,
        connected_pairs,
    })
}

pub fn compare_models(m: MetricMatrix, alpha: Alpha) -> Result<ComparisonReport> {
    let friedman = friedman_test(&m)?;
    let named: Vec<(String, f64)> = m.models.iter().cloned().zip(friedman.avg_ranks.iter().copied()).collect();
    let cd_diagram = cd_diagram(&named, m.blocks.len(), alpha)?;
    Ok(ComparisonReport {
        matrix: m,
        friedman,
        cd_diagram,
    })
}
