//! Sentence-numbered clinical notes and their ground-truth annotations.
//!
//! Two on-disk layouts are supported: a delimited table whose `sentences_json`
//! column embeds a JSON array, and JSON lines with a native `sentences` array.
//! Both carry the same six fields. Sentences may be given either as plain
//! strings (position is the id) or as `{"id", "text"}` objects, in which case
//! the ids must be contiguous from 0.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation at line {line}, field `{field}`: {message}")]
    Schema {
        line: u64,
        field: &'static str,
        message: String,
    },
    #[error("note `{text_id}`: {message}")]
    Invariant { text_id: String, message: String },
    #[error("note `{text_id}` carries no ground truth")]
    MissingTruth { text_id: String },
    #[error("unknown dataset format `{0}` (expected csv, tsv or jsonl)")]
    UnknownFormat(String),
}

/// One numbered sentence of a note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: u32,
    pub text: String,
}

/// The error location plus its replacement text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceCorrection {
    pub sentence_id: u32,
    pub corrected: String,
}

/// Reference annotation. `error` is `None` for a note without an error, which
/// encodes as flag 0, id -1, no correction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    pub error: Option<SentenceCorrection>,
}

impl GroundTruth {
    pub fn no_error() -> Self {
        Self { error: None }
    }

    pub fn with_error(sentence_id: u32, corrected: impl Into<String>) -> Self {
        Self {
            error: Some(SentenceCorrection {
                sentence_id,
                corrected: corrected.into(),
            }),
        }
    }

    pub fn error_flag(&self) -> u8 {
        u8::from(self.error.is_some())
    }

    pub fn error_sentence_id(&self) -> i64 {
        self.error.as_ref().map_or(-1, |e| i64::from(e.sentence_id))
    }

    pub fn corrected_sentence(&self) -> Option<&str> {
        self.error.as_ref().map(|e| e.corrected.as_str())
    }

    /// Builds a truth record from the three wire fields, enforcing
    /// flag = 0 ⇔ id = -1 ⇔ correction absent. Returns the offending field on
    /// failure.
    pub fn from_fields(
        error_flag: i64,
        error_sentence_id: i64,
        corrected_sentence: Option<&str>,
    ) -> Result<Self, (&'static str, String)> {
        let correction = corrected_sentence.filter(|c| !c.trim().is_empty());
        match error_flag {
            0 => {
                if error_sentence_id != -1 {
                    return Err((
                        "error_sentence_id",
                        format!("error_flag is 0 but error_sentence_id is {error_sentence_id}"),
                    ));
                }
                if correction.is_some() {
                    return Err((
                        "corrected_sentence",
                        "error_flag is 0 but a correction is present".into(),
                    ));
                }
                Ok(Self::no_error())
            }
            1 => {
                let id = u32::try_from(error_sentence_id).map_err(|_| {
                    (
                        "error_sentence_id",
                        format!("error_flag is 1 but error_sentence_id is {error_sentence_id}"),
                    )
                })?;
                let corrected = correction.ok_or((
                    "corrected_sentence",
                    "error_flag is 1 but the correction is empty".to_string(),
                ))?;
                Ok(Self::with_error(id, corrected))
            }
            other => Err(("error_flag", format!("expected 0 or 1, got {other}"))),
        }
    }
}

/// A clinical note: full text, the ordered sentence list and optional truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedNote {
    pub text_id: String,
    pub text: String,
    sentences: Vec<Sentence>,
    pub truth: Option<GroundTruth>,
}

impl AnnotatedNote {
    /// Validates sentence ids (unique, contiguous from 0), non-empty sentence
    /// text, and that an annotated error id points at an existing sentence.
    pub fn new(
        text_id: impl Into<String>,
        text: impl Into<String>,
        sentences: Vec<Sentence>,
        truth: Option<GroundTruth>,
    ) -> Result<Self, CorpusError> {
        let text_id = text_id.into();
        let invariant = |message: String| CorpusError::Invariant {
            text_id: text_id.clone(),
            message,
        };
        if sentences.is_empty() {
            return Err(invariant("note has no sentences".into()));
        }
        for (pos, s) in sentences.iter().enumerate() {
            if s.id as usize != pos {
                return Err(invariant(format!(
                    "sentence ids must be contiguous from 0; position {pos} has id {}",
                    s.id
                )));
            }
            if s.text.trim().is_empty() {
                return Err(invariant(format!("sentence {} is empty", s.id)));
            }
        }
        if let Some(err) = truth.as_ref().and_then(|t| t.error.as_ref()) {
            if err.sentence_id as usize >= sentences.len() {
                return Err(invariant(format!(
                    "error_sentence_id {} exceeds max sentence id {}",
                    err.sentence_id,
                    sentences.len() - 1
                )));
            }
        }
        Ok(Self {
            text_id,
            text: text.into(),
            sentences,
            truth,
        })
    }

    /// Convenience constructor numbering `sentences` by position.
    pub fn from_texts<S: Into<String>>(
        text_id: impl Into<String>,
        sentences: impl IntoIterator<Item = S>,
        truth: Option<GroundTruth>,
    ) -> Result<Self, CorpusError> {
        let sentences: Vec<Sentence> = sentences
            .into_iter()
            .enumerate()
            .map(|(i, t)| Sentence {
                id: i as u32,
                text: t.into(),
            })
            .collect();
        let text = sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Self::new(text_id, text, sentences, truth)
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn sentence(&self, id: u32) -> Option<&str> {
        self.sentences.get(id as usize).map(|s| s.text.as_str())
    }

    pub fn max_sentence_id(&self) -> u32 {
        (self.sentences.len() - 1) as u32
    }

    pub fn without_truth(&self) -> Self {
        Self {
            truth: None,
            ..self.clone()
        }
    }
}

/// `<id> <text>` per sentence, newline separated, no trailing newline.
pub fn render_numbered(note: &AnnotatedNote) -> String {
    note.sentences
        .iter()
        .map(|s| format!("{} {}", s.id, s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Comma separated with a header row.
    Csv,
    /// Tab separated with a header row.
    Tsv,
    JsonLines,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        match ext.as_str() {
            "csv" => Ok(Self::Csv),
            "tsv" => Ok(Self::Tsv),
            "jsonl" | "ndjson" => Ok(Self::JsonLines),
            _ => Err(CorpusError::UnknownFormat(ext)),
        }
    }

    fn delimiter(self) -> u8 {
        match self {
            Self::Tsv => b'\t',
            _ => b',',
        }
    }
}

/// One row as it appears on disk, shared by both layouts.
#[derive(Debug, Serialize, Deserialize)]
struct RawRow {
    text_id: String,
    #[serde(default)]
    text: String,
    #[serde(default)]
    sentences: Value,
    #[serde(default)]
    error_flag: Option<i64>,
    #[serde(default)]
    error_sentence_id: Option<i64>,
    #[serde(default)]
    corrected_sentence: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    text_id: String,
    #[serde(default)]
    text: String,
    sentences_json: String,
    #[serde(default)]
    error_flag: String,
    #[serde(default)]
    error_sentence_id: String,
    #[serde(default)]
    corrected_sentence: String,
}

/// Parses a JSON sentence array of either strings or `{id, text}` objects.
pub(crate) fn sentences_from_json(value: &Value) -> Result<Vec<Sentence>, String> {
    let items = value
        .as_array()
        .ok_or_else(|| "expected a JSON array of sentences".to_string())?;
    items
        .iter()
        .enumerate()
        .map(|(pos, item)| match item {
            Value::String(text) => Ok(Sentence {
                id: pos as u32,
                text: text.clone(),
            }),
            Value::Object(_) => serde_json::from_value::<Sentence>(item.clone())
                .map_err(|e| format!("sentence {pos}: {e}")),
            other => Err(format!("sentence {pos}: unexpected value {other}")),
        })
        .collect()
}

fn parse_opt_int(raw: &str, line: u64, field: &'static str) -> Result<Option<i64>, CorpusError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<i64>().map(Some).map_err(|_| CorpusError::Schema {
        line,
        field,
        message: format!("`{raw}` is not an integer"),
    })
}

fn build_note(row: RawRow, line: u64) -> Result<AnnotatedNote, CorpusError> {
    let sentences = sentences_from_json(&row.sentences).map_err(|message| CorpusError::Schema {
        line,
        field: "sentences",
        message,
    })?;
    let truth = match (row.error_flag, row.error_sentence_id) {
        (None, None) => None,
        (Some(flag), id) => {
            let id = id.ok_or(CorpusError::Schema {
                line,
                field: "error_sentence_id",
                message: "missing while error_flag is set".into(),
            })?;
            Some(
                GroundTruth::from_fields(flag, id, row.corrected_sentence.as_deref()).map_err(
                    |(field, message)| CorpusError::Schema {
                        line,
                        field,
                        message,
                    },
                )?,
            )
        }
        (None, Some(_)) => {
            return Err(CorpusError::Schema {
                line,
                field: "error_flag",
                message: "missing while error_sentence_id is set".into(),
            })
        }
    };
    AnnotatedNote::new(row.text_id, row.text, sentences, truth)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads every note in file order.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<AnnotatedNote>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    match format {
        DatasetFormat::JsonLines => {
            let mut notes = Vec::new();
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line_no = idx as u64 + 1;
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: RawRow = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
                    line: line_no,
                    field: "record",
                    message: e.to_string(),
                })?;
                notes.push(build_note(row, line_no)?);
            }
            Ok(notes)
        }
        DatasetFormat::Csv | DatasetFormat::Tsv => {
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(format.delimiter())
                .from_reader(file);
            let headers = reader
                .headers()
                .map_err(|e| CorpusError::Schema {
                    line: 1,
                    field: "header",
                    message: e.to_string(),
                })?
                .clone();
            let mut notes = Vec::new();
            for result in reader.records() {
                let record = result.map_err(|e| CorpusError::Schema {
                    line: e.position().map_or(0, |p| p.line()),
                    field: "record",
                    message: e.to_string(),
                })?;
                let line = record.position().map_or(0, |p| p.line());
                let row: CsvRow =
                    record
                        .deserialize(Some(&headers))
                        .map_err(|e| CorpusError::Schema {
                            line,
                            field: "record",
                            message: e.to_string(),
                        })?;
                let sentences: Value =
                    serde_json::from_str(&row.sentences_json).map_err(|e| CorpusError::Schema {
                        line,
                        field: "sentences_json",
                        message: e.to_string(),
                    })?;
                let corrected = (!row.corrected_sentence.is_empty()).then_some(row.corrected_sentence);
                let raw = RawRow {
                    text_id: row.text_id,
                    text: row.text,
                    sentences,
                    error_flag: parse_opt_int(&row.error_flag, line, "error_flag")?,
                    error_sentence_id: parse_opt_int(&row.error_sentence_id, line, "error_sentence_id")?,
                    corrected_sentence: corrected,
                };
                notes.push(build_note(raw, line)?);
            }
            Ok(notes)
        }
    }
}

/// Loads a dataset, inferring the format from the file extension.
pub fn load_dataset_auto(path: &Path) -> Result<Vec<AnnotatedNote>, CorpusError> {
    load_dataset(path, DatasetFormat::from_path(path)?)
}

fn to_raw(note: &AnnotatedNote) -> RawRow {
    RawRow {
        text_id: note.text_id.clone(),
        text: note.text.clone(),
        sentences: Value::Array(
            note.sentences
                .iter()
                .map(|s| Value::String(s.text.clone()))
                .collect(),
        ),
        error_flag: note.truth.as_ref().map(|t| i64::from(t.error_flag())),
        error_sentence_id: note.truth.as_ref().map(GroundTruth::error_sentence_id),
        corrected_sentence: note
            .truth
            .as_ref()
            .and_then(|t| t.corrected_sentence().map(str::to_owned)),
    }
}

pub fn write_dataset(
    notes: &[AnnotatedNote],
    path: &Path,
    format: DatasetFormat,
) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    match format {
        DatasetFormat::JsonLines => {
            let mut out = BufWriter::new(file);
            for note in notes {
                let line = serde_json::to_string(&to_raw(note)).expect("row serializes");
                writeln!(out, "{line}").map_err(io_err(path))?;
            }
            out.flush().map_err(io_err(path))
        }
        DatasetFormat::Csv | DatasetFormat::Tsv => {
            let mut writer = csv::WriterBuilder::new()
                .delimiter(format.delimiter())
                .from_writer(file);
            for note in notes {
                let raw = to_raw(note);
                let row = CsvRow {
                    text_id: raw.text_id,
                    text: raw.text,
                    sentences_json: raw.sentences.to_string(),
                    error_flag: raw.error_flag.map(|v| v.to_string()).unwrap_or_default(),
                    error_sentence_id: raw
                        .error_sentence_id
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                    corrected_sentence: raw.corrected_sentence.unwrap_or_default(),
                };
                writer.serialize(row).map_err(|e| CorpusError::Io {
                    path: path.display().to_string(),
                    source: e.into(),
                })?;
            }
            writer.flush().map_err(io_err(path))
        }
    }
}

/// Size and error share of an annotated dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub count: usize,
    pub error_count: usize,
    /// Percentage of notes with an error, rounded to two decimals.
    pub error_percent: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} notes, {:.2}% with errors", self.count, self.error_percent)
    }
}

pub fn dataset_stats(notes: &[AnnotatedNote]) -> Result<DatasetStats, CorpusError> {
    let mut error_count = 0;
    for note in notes {
        let truth = note.truth.as_ref().ok_or_else(|| CorpusError::MissingTruth {
            text_id: note.text_id.clone(),
        })?;
        error_count += usize::from(truth.error.is_some());
    }
    let count = notes.len();
    let error_percent = if count == 0 {
        0.0
    } else {
        // integer rounding of basis points keeps the 2-decimal value exact
        let basis_points = (error_count as u128 * 1_000_000 / count as u128 + 50) / 100;
        basis_points as f64 / 100.0
    };
    Ok(DatasetStats {
        count,
        error_count,
        error_percent,
    })
}
