//! Auditing tools for dermoscopic classifier benchmarks: joint-error
//! permutation tests, inter-rater agreement, image quality screening,
//! model comparison and a blinded annotation service.

pub mod agreement;
pub mod comparison;
pub mod error;
pub mod ingestion;
pub mod label;
pub mod permutation;
pub mod quality;
pub mod report;
pub mod service;

pub use error::{AuditError, Result};
pub use label::{ClassLabel, Diagnosis};
