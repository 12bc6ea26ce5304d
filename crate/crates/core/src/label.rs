//! Diagnostic class labels and the activation helpers shared by every module
//! that turns model outputs into a class.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One of the eight ground-truth diagnoses.
///
/// The declaration order is the canonical class order used for activation
/// vectors, table rows and tie-breaking: AK, BCC, BKL, DF, MEL, NV, SCC, VASC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    Ak,
    Bcc,
    Bkl,
    Df,
    Mel,
    Nv,
    Scc,
    Vasc,
}

pub const CLASS_COUNT: usize = 8;

impl ClassLabel {
    pub const ALL: [ClassLabel; CLASS_COUNT] = [
        ClassLabel::Ak,
        ClassLabel::Bcc,
        ClassLabel::Bkl,
        ClassLabel::Df,
        ClassLabel::Mel,
        ClassLabel::Nv,
        ClassLabel::Scc,
        ClassLabel::Vasc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            ClassLabel::Ak => "AK",
            ClassLabel::Bcc => "BCC",
            ClassLabel::Bkl => "BKL",
            ClassLabel::Df => "DF",
            ClassLabel::Mel => "MEL",
            ClassLabel::Nv => "NV",
            ClassLabel::Scc => "SCC",
            ClassLabel::Vasc => "VASC",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown class code {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for ClassLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let code = s.trim();
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.code().eq_ignore_ascii_case(code))
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

impl Serialize for ClassLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A rater's answer: one of the eight classes or the explicit "uncertain"
/// option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Diagnosis {
    Class(ClassLabel),
    Other,
}

impl Diagnosis {
    pub fn class(self) -> Option<ClassLabel> {
        match self {
            Diagnosis::Class(c) => Some(c),
            Diagnosis::Other => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Diagnosis::Class(c) => c.code(),
            Diagnosis::Other => "OTHER",
        }
    }

    /// All nine answer categories, classes first then OTHER.
    pub fn categories() -> impl Iterator<Item = Diagnosis> {
        ClassLabel::ALL
            .into_iter()
            .map(Diagnosis::Class)
            .chain(std::iter::once(Diagnosis::Other))
    }

    pub fn category_index(self) -> usize {
        match self {
            Diagnosis::Class(c) => c.index(),
            Diagnosis::Other => CLASS_COUNT,
        }
    }
}

impl From<ClassLabel> for Diagnosis {
    fn from(c: ClassLabel) -> Self {
        Diagnosis::Class(c)
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Diagnosis {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("OTHER") {
            Ok(Diagnosis::Other)
        } else {
            s.parse().map(Diagnosis::Class)
        }
    }
}

impl Serialize for Diagnosis {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Diagnosis {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Index of the largest value; the lowest index wins ties.
///
/// Returns `None` for an empty slice.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
