//! Study configuration, read from a TOML file.
//!
//! ```toml
//! admin_token = "admin-secret"
//! log_path = "ratings.jsonl"          # relative to this file
//! senior_rater_id = "derm1"           # optional
//! senior_second_pass_token = "t1b"    # optional, acts as "derm1#pass2"
//! shuffle_seed = 17                   # optional per-rater case order
//!
//! [[raters]]
//! id = "derm1"
//! token = "t1"
//!
//! [[cases]]
//! id = "case-001"
//! image = "images/case-001.jpg"
//! age = 60
//! sex = "male"
//! site = "torso"
//! batch = "b3"                        # optional opaque tag shown to raters
//! ```
//!
//! Case entries reject unknown keys, so labels or group names cannot be
//! smuggled into rater-facing payloads through the manifest.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agreement::SECOND_PASS_SUFFIX;
use crate::error::{AuditError, Result};
use crate::ingestion::Sex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterEntry {
    pub id: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default)]
    pub age: Option<u32>,
    #[serde(default)]
    pub sex: Option<Sex>,
    #[serde(default)]
    pub site: Option<String>,
    #[serde(default)]
    pub batch: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub admin_token: String,
    pub log_path: PathBuf,
    #[serde(default)]
    pub senior_rater_id: Option<String>,
    #[serde(default)]
    pub senior_second_pass_token: Option<String>,
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    pub raters: Vec<RaterEntry>,
    #[serde(default)]
    pub cases: Vec<CaseEntry>,
}

impl StudyConfig {
    /// Parses and validates a config file. Relative paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
        let mut config: StudyConfig = toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() as u64 + 1)
                .unwrap_or(0);
            AuditError::parse(line, format!("{}: {}", path.display(), e.message()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.log_path.is_relative() {
            self.log_path = base.join(&self.log_path);
        }
        for c in &mut self.cases {
            if c.image.is_relative() {
                c.image = base.join(&c.image);
            }
        }
    }

    /// Checks identity uniqueness and that every case image can be opened.
    pub fn validate(&self) -> Result<()> {
        let mut tokens = HashSet::new();
        let mut all_tokens = vec![&self.admin_token];
        all_tokens.extend(self.raters.iter().map(|r| &r.token));
        all_tokens.extend(self.senior_second_pass_token.iter());
        for t in all_tokens {
            if t.trim().is_empty() {
                return Err(AuditError::Integrity("empty token in study config".into()));
            }
            if !tokens.insert(t) {
                return Err(AuditError::Integrity("tokens must be unique".into()));
            }
        }
        let mut ids = HashSet::new();
        for r in &self.raters {
            if r.id.is_empty() || r.id.contains('#') {
                return Err(AuditError::Integrity(format!("invalid rater id {:?}", r.id)));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(AuditError::Integrity(format!("duplicate rater id {}", r.id)));
            }
        }
        match (&self.senior_rater_id, &self.senior_second_pass_token) {
            (Some(s), _) if !ids.contains(s.as_str()) => {
                return Err(AuditError::Integrity(format!("senior rater {s} is not a configured rater")));
            }
            (None, Some(_)) => {
                return Err(AuditError::Integrity(
                    "senior_second_pass_token given without senior_rater_id".into(),
                ));
            }
            _ => {}
        }
        let mut cases = HashSet::new();
        for c in &self.cases {
            if c.id.is_empty() || c.id.contains('/') {
                return Err(AuditError::Integrity(format!("invalid case id {:?}", c.id)));
            }
            if !cases.insert(c.id.as_str()) {
                return Err(AuditError::Integrity(format!("duplicate case id {}", c.id)));
            }
            let readable = std::fs::File::open(&c.image)
                .and_then(|f| f.metadata())
                .map(|m| m.is_file())
                .unwrap_or(false);
            if !readable {
                return Err(AuditError::Integrity(format!(
                    "case {}: image {} is missing or unreadable",
                    c.id,
                    c.image.display()
                )));
            }
        }
        Ok(())
    }

    /// Rater id stored for the senior rater's second pass.
    pub fn second_pass_id(&self) -> Option<String> {
        self.senior_rater_id.as_ref().map(|s| format!("{s}{SECOND_PASS_SUFFIX}"))
    }
}
