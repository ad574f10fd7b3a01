//! Turning raw model text into a [`Prediction`], and reconciling that
//! prediction with the note it was made for.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::corpus::AnnotatedNote;
use crate::prompting::ErrorCategory;

const NO_ERROR_FORMS: &str = include_str!("../fixtures/no_error_forms.txt");
const EXCERPT_CHARS: usize = 200;

pub const KEY_SENTENCE_ID: &str = "Error Sentence ID";
pub const KEY_CATEGORY: &str = "Error Category";
pub const KEY_REASON: &str = "Reason";
pub const KEY_CORRECTION: &str = "Corrected Sentence";

/// Where a prediction came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub text_id: String,
    pub provider_name: String,
    pub sample_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorReport {
    pub sentence_id: u32,
    pub category: Option<ErrorCategory>,
    pub reason: Option<String>,
    pub corrected_sentence: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finding {
    NoError,
    Error(ErrorReport),
}

/// One model's answer for one note.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub finding: Finding,
    pub provenance: Provenance,
}

impl Prediction {
    pub fn no_error() -> Self {
        Self {
            finding: Finding::NoError,
            provenance: Provenance::default(),
        }
    }

    pub fn error(
        sentence_id: u32,
        category: Option<ErrorCategory>,
        reason: Option<&str>,
        corrected_sentence: impl Into<String>,
    ) -> Self {
        Self {
            finding: Finding::Error(ErrorReport {
                sentence_id,
                category,
                reason: reason.map(str::to_owned),
                corrected_sentence: corrected_sentence.into(),
            }),
            provenance: Provenance::default(),
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn error_flag(&self) -> u8 {
        u8::from(matches!(self.finding, Finding::Error(_)))
    }

    /// The vote key: `None` means no error.
    pub fn sentence_id(&self) -> Option<u32> {
        match &self.finding {
            Finding::NoError => None,
            Finding::Error(e) => Some(e.sentence_id),
        }
    }

    pub fn error_sentence_id(&self) -> i64 {
        self.sentence_id().map_or(-1, i64::from)
    }

    pub fn corrected_sentence(&self) -> Option<&str> {
        match &self.finding {
            Finding::NoError => None,
            Finding::Error(e) => Some(&e.corrected_sentence),
        }
    }

    pub fn category(&self) -> Option<ErrorCategory> {
        match &self.finding {
            Finding::NoError => None,
            Finding::Error(e) => e.category,
        }
    }

    /// Renders the output schema models are asked to produce. A no-error
    /// prediction carries only the id key, set to -1.
    pub fn to_output_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(rename = "Error Sentence ID")]
            id: i64,
            #[serde(rename = "Error Category", skip_serializing_if = "Option::is_none")]
            category: Option<&'static str>,
            #[serde(rename = "Reason", skip_serializing_if = "Option::is_none")]
            reason: Option<&'a str>,
            #[serde(rename = "Corrected Sentence", skip_serializing_if = "Option::is_none")]
            corrected: Option<&'a str>,
        }
        let out = match &self.finding {
            Finding::NoError => Out {
                id: -1,
                category: None,
                reason: None,
                corrected: None,
            },
            Finding::Error(e) => Out {
                id: i64::from(e.sentence_id),
                category: e.category.map(ErrorCategory::label),
                reason: e.reason.as_deref(),
                corrected: Some(&e.corrected_sentence),
            },
        };
        serde_json::to_string_pretty(&out).expect("prediction serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureKind {
    NoJsonFound,
    BadJson,
    MissingKey,
    IdOutOfRange,
    BadCategory,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoJsonFound => "no-json-found",
            Self::BadJson => "bad-json",
            Self::MissingKey => "missing-key",
            Self::IdOutOfRange => "id-out-of-range",
            Self::BadCategory => "bad-category",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    pub kind: FailureKind,
    /// At most 200 characters of the offending text.
    pub raw_excerpt: String,
}

impl ParseFailure {
    fn new(kind: FailureKind, raw: &str) -> Self {
        Self {
            kind,
            raw_excerpt: raw.chars().take(EXCERPT_CHARS).collect(),
        }
    }
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}", self.kind.as_str(), self.raw_excerpt)
    }
}

impl std::error::Error for ParseFailure {}

struct NoErrorForms {
    ids: Vec<String>,
    bare: Vec<String>,
}

fn no_error_forms() -> &'static NoErrorForms {
    static FORMS: OnceLock<NoErrorForms> = OnceLock::new();
    FORMS.get_or_init(|| {
        let mut forms = NoErrorForms {
            ids: Vec::new(),
            bare: Vec::new(),
        };
        for line in NO_ERROR_FORMS.lines().map(str::trim) {
            if let Some(v) = line.strip_prefix("id:") {
                forms.ids.push(v.trim().to_lowercase());
            } else if let Some(v) = line.strip_prefix("bare:") {
                forms.bare.push(v.trim().to_lowercase());
            }
        }
        forms
    })
}

fn is_bare_no_error(raw: &str) -> bool {
    let cleaned = raw
        .trim()
        .trim_end_matches(['.', '!'])
        .trim()
        .to_lowercase();
    no_error_forms().bare.contains(&cleaned)
}

/// Finds the end (exclusive byte offset) of the balanced object opening at
/// `start`, skipping braces inside string literals.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if in_string {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Balanced `{...}` spans of `text`, left to right. An unclosed brace is
/// skipped and scanning resumes just after it.
pub fn balanced_objects(text: &str) -> impl Iterator<Item = &str> + '_ {
    let mut cursor = 0;
    std::iter::from_fn(move || {
        while let Some(rel) = text[cursor..].find('{') {
            let start = cursor + rel;
            match balanced_end(text, start) {
                Some(end) => {
                    cursor = end;
                    return Some(&text[start..end]);
                }
                None => cursor = start + 1,
            }
        }
        cursor = text.len();
        None
    })
}

fn id_from_value(value: &Value, raw: &str) -> Result<i64, ParseFailure> {
    match value {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0 && f.abs() < 1e15).map(|f| f as i64))
            .ok_or_else(|| ParseFailure::new(FailureKind::BadJson, raw)),
        Value::String(s) => {
            let s = s.trim();
            if no_error_forms().ids.iter().any(|f| f.eq_ignore_ascii_case(s)) {
                return Ok(-1);
            }
            s.parse::<i64>()
                .map_err(|_| ParseFailure::new(FailureKind::BadJson, raw))
        }
        _ => Err(ParseFailure::new(FailureKind::BadJson, raw)),
    }
}

fn prediction_from_object(obj: &Map<String, Value>, raw: &str) -> Result<Prediction, ParseFailure> {
    let fields: HashMap<String, &Value> = obj
        .iter()
        .map(|(k, v)| (k.trim().to_lowercase(), v))
        .collect();
    let field = |key: &str| {
        fields
            .get(&key.to_lowercase())
            .copied()
            .filter(|v| !v.is_null())
    };

    let id_value =
        field(KEY_SENTENCE_ID).ok_or_else(|| ParseFailure::new(FailureKind::MissingKey, raw))?;
    let id = id_from_value(id_value, raw)?;
    if id == -1 {
        return Ok(Prediction::no_error());
    }
    let sentence_id =
        u32::try_from(id).map_err(|_| ParseFailure::new(FailureKind::IdOutOfRange, raw))?;

    let corrected = match field(KEY_CORRECTION) {
        None => return Err(ParseFailure::new(FailureKind::MissingKey, raw)),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ParseFailure::new(FailureKind::BadJson, raw)),
    };
    let category = match field(KEY_CATEGORY) {
        None => None,
        Some(Value::String(s)) if s.trim().is_empty() => None,
        Some(Value::String(s)) => Some(
            ErrorCategory::from_label(s)
                .ok_or_else(|| ParseFailure::new(FailureKind::BadCategory, raw))?,
        ),
        Some(_) => return Err(ParseFailure::new(FailureKind::BadCategory, raw)),
    };
    let reason = field(KEY_REASON).map(|v| match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    });
    Ok(Prediction::error(
        sentence_id,
        category,
        reason.as_deref(),
        corrected,
    ))
}

/// Extracts the first balanced JSON object that parses, tolerating prose
/// around it, and maps its keys case-insensitively. Outputs without any JSON
/// are accepted when they match one of the bare no-error forms.
pub fn parse_output(raw: &str) -> Result<Prediction, ParseFailure> {
    let mut saw_candidate = false;
    for candidate in balanced_objects(raw) {
        saw_candidate = true;
        if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(candidate) {
            return prediction_from_object(&obj, raw);
        }
    }
    if is_bare_no_error(raw) {
        return Ok(Prediction::no_error());
    }
    let kind = if saw_candidate {
        FailureKind::BadJson
    } else {
        FailureKind::NoJsonFound
    };
    Err(ParseFailure::new(kind, raw))
}

fn squash_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reconciles a parsed prediction with its note. Discard-category findings,
/// out-of-range ids and corrections that leave the sentence unchanged all
/// become no-error; surviving corrections are trimmed.
pub fn normalize(pred: &Prediction, note: &AnnotatedNote) -> Prediction {
    let report = match &pred.finding {
        Finding::NoError => return pred.clone(),
        Finding::Error(report) => report,
    };
    let downgrade = || Prediction {
        finding: Finding::NoError,
        provenance: pred.provenance.clone(),
    };
    if report.category.is_some_and(ErrorCategory::is_discard) {
        return downgrade();
    }
    let Some(original) = note.sentence(report.sentence_id) else {
        log::warn!(
            "note {}: predicted sentence id {} exceeds max id {}; treating as no error",
            note.text_id,
            report.sentence_id,
            note.max_sentence_id()
        );
        return downgrade();
    };
    let corrected = report.corrected_sentence.trim();
    if corrected.is_empty() || squash_whitespace(corrected) == squash_whitespace(original) {
        return downgrade();
    }
    Prediction {
        finding: Finding::Error(ErrorReport {
            corrected_sentence: corrected.to_owned(),
            ..report.clone()
        }),
        provenance: pred.provenance.clone(),
    }
}

/// Parse-then-normalize; a parse failure counts as a no-error vote.
pub fn interpret(raw: &str, note: &AnnotatedNote, provenance: Provenance) -> Prediction {
    match parse_output(raw) {
        Ok(pred) => normalize(&pred.with_provenance(provenance), note),
        Err(failure) => {
            log::debug!(
                "note {} sample {} from {}: {failure}",
                provenance.text_id,
                provenance.sample_index,
                provenance.provider_name
            );
            Prediction::no_error().with_provenance(provenance)
        }
    }
}
