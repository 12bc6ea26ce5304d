//! Append-only JSON-lines rating log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;

use super::RatingRecord;
use crate::error::{AuditError, Result};
use crate::label::Diagnosis;

/// The log file plus the in-memory view it reconstructs. Callers serialize
/// access (the server keeps it behind one mutex), so appends and the
/// revision counter never interleave.
#[derive(Debug)]
pub struct RatingLog {
    path: PathBuf,
    file: File,
    len: u64,
    records: Vec<RatingRecord>,
    latest: HashMap<(String, String), usize>,
}

impl RatingLog {
    /// Opens or creates the log and replays it. A final line without a
    /// newline that does not parse is an interrupted append: it was never
    /// acknowledged and is cut off. Any other bad line is an error.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| AuditError::io(path, e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(|e| AuditError::io(path, e))?;

        let mut log = RatingLog {
            path: path.to_path_buf(),
            file,
            len: 0,
            records: Vec::new(),
            latest: HashMap::new(),
        };
        let mut offset = 0usize;
        let mut line_no = 0u64;
        while offset < buf.len() {
            line_no += 1;
            let (line, next, terminated) = match buf[offset..].iter().position(|&b| b == b'\n') {
                Some(p) => (&buf[offset..offset + p], offset + p + 1, true),
                None => (&buf[offset..], buf.len(), false),
            };
            let text = String::from_utf8_lossy(line);
            if text.trim().is_empty() {
                offset = next;
                continue;
            }
            match serde_json::from_str::<RatingRecord>(&text) {
                Ok(r) => {
                    log.index(r);
                    if !terminated {
                        log.file.write_all(b"\n").map_err(|e| AuditError::io(path, e))?;
                        log.file.sync_data().map_err(|e| AuditError::io(path, e))?;
                        break;
                    }
                }
                Err(_) if !terminated => {
                    tracing::warn!(line = line_no, "discarding interrupted final log line");
                    log.file.set_len(offset as u64).map_err(|e| AuditError::io(path, e))?;
                    log.file.sync_data().map_err(|e| AuditError::io(path, e))?;
                    break;
                }
                Err(e) => {
                    return Err(AuditError::parse(line_no, format!("{}: {e}", path.display())));
                }
            }
            offset = next;
        }
        log.len = log.file.seek(SeekFrom::End(0)).map_err(|e| AuditError::io(path, e))?;
        Ok(log)
    }

    fn index(&mut self, r: RatingRecord) {
        let key = (r.rater_id.clone(), r.case_id.clone());
        let i = self.records.len();
        match self.latest.get(&key) {
            Some(&j) if self.records[j].revision >= r.revision => {}
            _ => {
                self.latest.insert(key, i);
            }
        }
        self.records.push(r);
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn latest(&self, rater_id: &str, case_id: &str) -> Option<&RatingRecord> {
        self.latest
            .get(&(rater_id.to_string(), case_id.to_string()))
            .map(|&i| &self.records[i])
    }

    /// Appends the next revision and syncs it to disk before returning.
    /// On failure the file is rolled back and nothing is recorded.
    pub fn append(
        &mut self,
        rater_id: &str,
        case_id: &str,
        diagnosis: Diagnosis,
        comment: Option<String>,
    ) -> Result<RatingRecord> {
        let revision = self.latest(rater_id, case_id).map_or(0, |r| r.revision + 1);
        let record = RatingRecord {
            rater_id: rater_id.to_string(),
            case_id: case_id.to_string(),
            diagnosis,
            comment,
            revision,
            timestamp: Utc::now(),
        };
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        let written = self.file.write_all(&line).and_then(|_| self.file.sync_data());
        if let Err(e) = written {
            let _ = self.file.set_len(self.len);
            return Err(AuditError::io(&self.path, e));
        }
        self.len += line.len() as u64;
        self.index(record.clone());
        Ok(record)
    }

    /// The log file's bytes as acknowledged so far.
    pub fn export(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serializes");
            out.push(b'\n');
        }
        out
    }
}
