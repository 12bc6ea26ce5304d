//! Blinded diagnosis-collection service.
//!
//! Raters see case images and patient metadata, never labels or model
//! output. Every submission is appended to a JSON-lines log and synced to
//! disk before it is acknowledged.

mod config;
mod http;
mod record;
mod store;

pub use config::{CaseEntry, RaterEntry, StudyConfig};
pub use http::{router, serve, CaseList, CaseMetadata, CaseSummary, CaseView, OwnDiagnosis};
pub use record::{latest_revisions, RatingRecord};
pub use store::RatingLog;
