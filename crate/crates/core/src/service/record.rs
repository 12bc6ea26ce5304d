use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::label::Diagnosis;

/// One rater's diagnosis of one case. Revisions of the same
/// `(rater_id, case_id)` pair are all retained; readers pick the latest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater_id: String,
    pub case_id: String,
    pub diagnosis: Diagnosis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub revision: u32,
    pub timestamp: DateTime<Utc>,
}

/// Keeps only the highest revision for each `(rater, case)` pair, preserving
/// the order in which pairs first appear.
pub fn latest_revisions(records: &[RatingRecord]) -> Vec<&RatingRecord> {
    let mut order: Vec<(&str, &str)> = Vec::new();
    let mut latest: std::collections::HashMap<(&str, &str), &RatingRecord> =
        std::collections::HashMap::new();
    for r in records {
        let key = (r.rater_id.as_str(), r.case_id.as_str());
        match latest.get(&key) {
            Some(prev) if prev.revision >= r.revision => {}
            Some(_) => {
                latest.insert(key, r);
            }
            None => {
                order.push(key);
                latest.insert(key, r);
            }
        }
    }
    order.into_iter().map(|k| latest[&k]).collect()
}
