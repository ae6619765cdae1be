//! Append-only run journal: one canonical JSON record per executor attempt.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::state::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttemptStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub ts: u64,
    pub run_id: String,
    pub step: String,
    pub option: String,
    pub status: AttemptStatus,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_ms: u64,
}

impl JournalRecord {
    pub fn to_line(&self) -> String {
        let json = serde_json::to_value(self).expect("journal record serializes");
        let bytes = Value::from(json).to_canonical().expect("journal record is finite");
        String::from_utf8(bytes).expect("canonical JSON is UTF-8")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal line {line}: {message}")]
    Line { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Collects records in memory and, optionally, appends them to a file.
#[derive(Debug, Default)]
pub struct Journal {
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    records: Vec<JournalRecord>,
    file: Option<File>,
}

impl Journal {
    pub fn in_memory() -> Self {
        Journal::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Journal { inner: Mutex::new(Inner { records: Vec::new(), file: Some(file) }) })
    }

    pub fn append(&self, record: JournalRecord) -> io::Result<()> {
        let mut inner = self.inner.lock().expect("journal lock poisoned");
        if let Some(file) = inner.file.as_mut() {
            let mut line = record.to_line();
            line.push('\n');
            file.write_all(line.as_bytes())?;
        }
        inner.records.push(record);
        Ok(())
    }

    /// Records appended through this handle, in append order.
    pub fn records(&self) -> Vec<JournalRecord> {
        self.inner.lock().expect("journal lock poisoned").records.clone()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    ts: u64,
    run_id: String,
    step: String,
    option: String,
    status: AttemptStatus,
    tokens_in: i64,
    tokens_out: i64,
    wall_ms: i64,
}

fn non_negative(name: &str, v: i64, line: usize) -> Result<u64, JournalError> {
    u64::try_from(v).map_err(|_| JournalError::Line { line, message: format!("negative {name} ({v})") })
}

/// Parses journal text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_journal(text: &str) -> Result<Vec<JournalRecord>, JournalError> {
    let mut out = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(raw_line)
            .map_err(|e| JournalError::Line { line, message: e.to_string() })?;
        out.push(JournalRecord {
            ts: raw.ts,
            run_id: raw.run_id,
            step: raw.step,
            option: raw.option,
            status: raw.status,
            tokens_in: non_negative("tokens_in", raw.tokens_in, line)?,
            tokens_out: non_negative("tokens_out", raw.tokens_out, line)?,
            wall_ms: non_negative("wall_ms", raw.wall_ms, line)?,
        });
    }
    Ok(out)
}
