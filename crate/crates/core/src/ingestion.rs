//! Loading prediction, ground-truth, metadata and rating files, and deriving
//! the models × images error matrix.
//!
//! All CSV inputs are comma-delimited UTF-8 with a header row. Ratings are
//! JSON lines.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::label::{argmax, softmax, ClassLabel, CLASS_COUNT};
use crate::service::RatingRecord;

pub const PREDICTION_HEADER: [&str; 11] = [
    "model", "fold", "image", "AK", "BCC", "BKL", "DF", "MEL", "NV", "SCC", "VASC",
];

/// One model's pre-softmax class activations for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub model_id: String,
    pub fold_id: u8,
    pub image_id: String,
    pub activations: [f64; CLASS_COUNT],
}

impl PredictionRecord {
    pub fn predicted(&self) -> ClassLabel {
        let idx = argmax(&self.activations).expect("activation vector is never empty");
        ClassLabel::ALL[idx]
    }
}

/// Image → label map that remembers insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    entries: Vec<(String, ClassLabel)>,
    index: HashMap<String, usize>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails if `image_id` already has a label.
    pub fn insert(&mut self, image_id: impl Into<String>, label: ClassLabel) -> Result<()> {
        let image_id = image_id.into();
        if self.index.contains_key(&image_id) {
            return Err(AuditError::Integrity(format!(
                "duplicate ground-truth entry for image {image_id}"
            )));
        }
        self.index.insert(image_id.clone(), self.entries.len());
        self.entries.push((image_id, label));
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<ClassLabel> {
        self.index.get(image_id).map(|&i| self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ClassLabel)> {
        self.entries.iter().map(|(id, l)| (id.as_str(), *l))
    }
}

impl FromIterator<(String, ClassLabel)> for GroundTruth {
    /// Later duplicates are ignored.
    fn from_iter<I: IntoIterator<Item = (String, ClassLabel)>>(iter: I) -> Self {
        let mut gt = GroundTruth::new();
        for (id, label) in iter {
            let _ = gt.insert(id, label);
        }
        gt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

/// Patient data attached to an image. Missing values stay `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientMetadata {
    pub image_id: String,
    pub age: Option<u32>,
    pub sex: Option<Sex>,
    pub site: Option<String>,
}

/// Boolean models × images grid; `true` marks a misclassification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMatrix {
    models: Vec<String>,
    images: Vec<String>,
    cells: Vec<bool>,
}

impl ErrorMatrix {
    pub fn new(models: Vec<String>, images: Vec<String>, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != models.len() * images.len() {
            return Err(AuditError::Domain(format!(
                "error matrix has {} cells, expected {} models x {} images",
                cells.len(),
                models.len(),
                images.len()
            )));
        }
        Ok(Self {
            models,
            images,
            cells,
        })
    }

    /// Builds a matrix from rows with generated identifiers `m0..` / `i0..`.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(AuditError::Domain("ragged error-matrix rows".into()));
        }
        let models = (0..rows.len()).map(|m| format!("m{m}")).collect();
        let images = (0..n).map(|i| format!("i{i}")).collect();
        Self::new(models, images, rows.concat())
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn images(&self) -> &[String] {
        &self.images
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn get(&self, model: usize, image: usize) -> bool {
        self.cells[model * self.images.len() + image]
    }

    pub fn row(&self, model: usize) -> &[bool] {
        let n = self.images.len();
        &self.cells[model * n..(model + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[bool]> {
        (0..self.n_models()).map(move |m| self.row(m))
    }

    /// Per-model misclassification counts; the quantity a stratified
    /// permutation preserves.
    pub fn row_error_counts(&self) -> Vec<usize> {
        self.rows().map(|r| r.iter().filter(|&&c| c).count()).collect()
    }

    /// Images misclassified by every model, in column order.
    pub fn jointly_misclassified(&self) -> Vec<&str> {
        (0..self.n_images())
            .filter(|&i| self.n_models() > 0 && (0..self.n_models()).all(|m| self.get(m, i)))
            .map(|i| self.images[i].as_str())
            .collect()
    }
}

fn csv_reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source)
}

fn csv_error(e: csv::Error) -> AuditError {
    let line = e.position().map_or(0, |p| p.line());
    AuditError::parse(line, e.to_string())
}

fn parse_finite(field: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| AuditError::parse(line, format!("column {column}: {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(AuditError::parse(line, format!("column {column}: non-finite value")));
    }
    Ok(v)
}

/// Parses a predictions CSV with header
/// `model,fold,image,AK,BCC,BKL,DF,MEL,NV,SCC,VASC`.
pub fn load_predictions<R: Read>(source: R) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv_reader(source);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let got: Vec<&str> = header.iter().collect();
    if got != PREDICTION_HEADER {
        return Err(AuditError::parse(
            1,
            format!("expected header {:?}, found {:?}", PREDICTION_HEADER.join(","), got.join(",")),
        ));
    }

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != PREDICTION_HEADER.len() {
            return Err(AuditError::parse(
                line,
                format!("expected {} fields, found {}", PREDICTION_HEADER.len(), row.len()),
            ));
        }
        let model_id = row[0].to_string();
        let fold_id: u8 = row[1]
            .parse()
            .ok()
            .filter(|f| *f <= 4)
            .ok_or_else(|| AuditError::parse(line, format!("fold {:?} is not an integer in 0..=4", &row[1])))?;
        let image_id = row[2].to_string();
        if model_id.is_empty() || image_id.is_empty() {
            return Err(AuditError::parse(line, "empty model or image identifier"));
        }
        let mut activations = [0.0; CLASS_COUNT];
        for (k, slot) in activations.iter_mut().enumerate() {
            *slot = parse_finite(&row[3 + k], line, PREDICTION_HEADER[3 + k])?;
        }
        if !seen.insert((model_id.clone(), fold_id, image_id.clone())) {
            return Err(AuditError::Integrity(format!(
                "duplicate prediction for model {model_id}, fold {fold_id}, image {image_id} (line {line})"
            )));
        }
        out.push(PredictionRecord {
            model_id,
            fold_id,
            image_id,
            activations,
        });
    }
    Ok(out)
}

pub fn write_predictions<W: Write>(records: &[PredictionRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| AuditError::Integrity(format!("csv write failed: {e}"));
    w.write_record(PREDICTION_HEADER).map_err(io)?;
    for r in records {
        let mut fields = vec![r.model_id.clone(), r.fold_id.to_string(), r.image_id.clone()];
        // `{:?}` on f64 prints the shortest representation that round-trips.
        fields.extend(r.activations.iter().map(|a| format!("{a:?}")));
        w.write_record(&fields).map_err(io)?;
    }
    w.flush()
        .map_err(|e| AuditError::Integrity(format!("csv write failed: {e}")))?;
    Ok(())
}

/// Parses ground truth in either the ISIC one-hot layout
/// (`image,MEL,NV,BCC,AK,BKL,DF,VASC,SCC[,UNK]`, columns in any order) or the
/// two-column `image,label` layout.
pub fn load_ground_truth<R: Read>(source: R) -> Result<GroundTruth> {
    let mut rdr = csv_reader(source);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let cols: Vec<String> = header.iter().map(|h| h.to_ascii_uppercase()).collect();
    if cols.first().map(String::as_str) != Some("IMAGE") {
        return Err(AuditError::parse(1, "first column must be `image`"));
    }

    let mut gt = GroundTruth::new();
    if cols.len() == 2 && cols[1] == "LABEL" {
        for row in rdr.records() {
            let row = row.map_err(csv_error)?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != 2 {
                return Err(AuditError::parse(line, format!("expected 2 fields, found {}", row.len())));
            }
            let label: ClassLabel = row[1]
                .parse()
                .map_err(|e: crate::label::UnknownLabel| AuditError::parse(line, e.to_string()))?;
            gt.insert(&row[0], label)?;
        }
        return Ok(gt);
    }

    // One-hot: map every class to its column; an UNK column may be present.
    let mut class_col = [usize::MAX; CLASS_COUNT];
    let mut unk_col = None;
    for (j, name) in cols.iter().enumerate().skip(1) {
        if name == "UNK" {
            unk_col = Some(j);
        } else if let Ok(c) = name.parse::<ClassLabel>() {
            if class_col[c.index()] != usize::MAX {
                return Err(AuditError::parse(1, format!("duplicate column {name}")));
            }
            class_col[c.index()] = j;
        } else {
            return Err(AuditError::parse(1, format!("unexpected column {name}")));
        }
    }
    if let Some(missing) = ClassLabel::ALL.iter().find(|c| class_col[c.index()] == usize::MAX) {
        return Err(AuditError::parse(1, format!("missing class column {missing}")));
    }

    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != cols.len() {
            return Err(AuditError::parse(
                line,
                format!("expected {} fields, found {}", cols.len(), row.len()),
            ));
        }
        let mut hot = Vec::new();
        for c in ClassLabel::ALL {
            let v = parse_finite(&row[class_col[c.index()]], line, c.code())?;
            if v == 1.0 {
                hot.push(c);
            } else if v != 0.0 {
                return Err(AuditError::parse(line, format!("column {c}: one-hot value must be 0 or 1")));
            }
        }
        if let Some(j) = unk_col {
            if parse_finite(&row[j], line, "UNK")? != 0.0 {
                return Err(AuditError::parse(line, "UNK label is not one of the eight classes"));
            }
        }
        match hot.as_slice() {
            [label] => gt.insert(&row[0], *label)?,
            _ => {
                return Err(AuditError::parse(
                    line,
                    format!("one-hot row must have exactly one 1, found {}", hot.len()),
                ))
            }
        }
    }
    Ok(gt)
}

/// Parses patient metadata. Recognised columns (any order, all but `image`
/// optional): `age` or `age_approx`, `sex`, `site` or `anatom_site_general`.
/// Empty cells are treated as missing.
pub fn load_metadata<R: Read>(source: R) -> Result<Vec<PatientMetadata>> {
    let mut rdr = csv_reader(source);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let find = |names: &[&str]| header.iter().position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)));
    let image_col = find(&["image", "image_id"])
        .ok_or_else(|| AuditError::parse(1, "missing `image` column"))?;
    let age_col = find(&["age", "age_approx"]);
    let sex_col = find(&["sex", "gender"]);
    let site_col = find(&["site", "anatom_site_general"]);

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line());
        let cell = |c: Option<usize>| c.and_then(|c| row.get(c)).filter(|s| !s.is_empty());
        let image_id = cell(Some(image_col))
            .ok_or_else(|| AuditError::parse(line, "empty image identifier"))?
            .to_string();
        let age = match cell(age_col) {
            None => None,
            Some(s) => {
                let v = parse_finite(s, line, "age")?;
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(AuditError::parse(line, format!("age {s:?} is not a non-negative integer")));
                }
                Some(v as u32)
            }
        };
        let sex = match cell(sex_col).map(str::to_ascii_lowercase).as_deref() {
            None => None,
            Some("male") => Some(Sex::Male),
            Some("female") => Some(Sex::Female),
            Some(other) => return Err(AuditError::parse(line, format!("unknown sex {other:?}"))),
        };
        let site = cell(site_col).map(str::to_string);
        out.push(PatientMetadata {
            image_id,
            age,
            sex,
            site,
        });
    }
    Ok(out)
}

/// Reads a JSON-lines rating log. Every revision is returned, in file order.
pub fn load_ratings<R: Read>(source: R) -> Result<Vec<RatingRecord>> {
    let reader = BufReader::new(source);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| AuditError::parse(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RatingRecord =
            serde_json::from_str(&line).map_err(|e| AuditError::parse(line_no, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_ratings<W: Write>(records: &[RatingRecord], mut sink: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}

/// Derives the error matrix. Models and images appear in first-seen order.
///
/// With `aggregate_folds`, activations from several folds of the same
/// `(model, image)` are softmax-normalised and averaged before the argmax.
/// Without it, more than one fold per pair is an integrity error.
pub fn build_error_matrix(
    preds: &[PredictionRecord],
    truth: &GroundTruth,
    aggregate_folds: bool,
) -> Result<ErrorMatrix> {
    let mut models: Vec<String> = Vec::new();
    let mut model_idx: HashMap<&str, usize> = HashMap::new();
    let mut images: Vec<String> = Vec::new();
    let mut image_idx: HashMap<&str, usize> = HashMap::new();
    let mut groups: HashMap<(usize, usize), Vec<&PredictionRecord>> = HashMap::new();

    for p in preds {
        let m = *model_idx.entry(&p.model_id).or_insert_with(|| {
            models.push(p.model_id.clone());
            models.len() - 1
        });
        let i = *image_idx.entry(&p.image_id).or_insert_with(|| {
            images.push(p.image_id.clone());
            images.len() - 1
        });
        groups.entry((m, i)).or_default().push(p);
    }

    let missing: Vec<&str> = images
        .iter()
        .filter(|id| truth.get(id).is_none())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(AuditError::Integrity(format!(
            "{} image(s) without a ground-truth label: {}",
            missing.len(),
            missing.join(", ")
        )));
    }

    let mut cells = vec![false; models.len() * images.len()];
    let mut holes = Vec::new();
    for (m, model) in models.iter().enumerate() {
        for (i, image) in images.iter().enumerate() {
            let Some(group) = groups.get(&(m, i)) else {
                holes.push(format!("{model}/{image}"));
                continue;
            };
            let predicted = match group.as_slice() {
                [single] => single.predicted(),
                many if aggregate_folds => {
                    let mut mean = [0.0; CLASS_COUNT];
                    for p in many {
                        for (acc, v) in mean.iter_mut().zip(softmax(&p.activations)) {
                            *acc += v;
                        }
                    }
                    ClassLabel::ALL[argmax(&mean).expect("non-empty")]
                }
                _ => {
                    return Err(AuditError::Integrity(format!(
                        "model {model} has {} folds for image {image}; enable fold aggregation",
                        group.len()
                    )))
                }
            };
            cells[m * images.len() + i] = Some(predicted) != truth.get(image);
        }
    }
    if !holes.is_empty() {
        return Err(AuditError::Integrity(format!(
            "missing predictions for model/image pairs: {}",
            holes.join(", ")
        )));
    }
    ErrorMatrix::new(models, images, cells)
}
