//! Append-only JSON-lines record of every provider response.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ledger {path} line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub text_id: String,
    pub provider_name: String,
    pub sample_index: u32,
    pub prompt_hash: String,
    pub raw_text: String,
    pub latency_ms: u64,
    pub timestamp: String,
    /// Set when the provider gave up on this note; `raw_text` is empty then.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl LedgerRecord {
    pub fn is_success(&self) -> bool {
        self.error.is_none()
    }
}

/// Serialized appends from any number of threads.
pub struct LedgerWriter {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl LedgerWriter {
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| LedgerError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(Self {
            path: path.to_owned(),
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    /// Appends the records as one contiguous block and flushes.
    pub fn append(&self, records: &[LedgerRecord]) -> Result<(), LedgerError> {
        let io = |source| LedgerError::Io {
            path: self.path.display().to_string(),
            source,
        };
        let mut out = self.out.lock().unwrap();
        for rec in records {
            let line = serde_json::to_string(rec).expect("ledger record serializes");
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRecord>, LedgerError> {
    let file = File::open(path).map_err(|source| LedgerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| LedgerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|source| LedgerError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                source,
            })?,
        );
    }
    Ok(records)
}
