//! The single end-to-end task prompt: instructions, the error taxonomy,
//! few-shot exemplars and the numbered test note.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{render_numbered, AnnotatedNote, CorpusError};
use crate::outparse::{Finding, Prediction};

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/default_prompt.txt");

const PLACEHOLDERS: [&str; 3] = ["taxonomy", "exemplars", "test_report"];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("taxonomy must have exactly 7 distinct categories, got {0}")]
    TaxonomySize(usize),
    #[error("exemplar `{text_id}`: {message}")]
    InvalidExemplar { text_id: String, message: String },
    #[error("exemplar {index}: unknown error category `{label}`")]
    UnknownCategory { index: usize, label: String },
    #[error("template is missing placeholder {{{0}}}")]
    MissingPlaceholder(&'static str),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("exemplar file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// The seven-way error taxonomy. `Others` is the discard bucket: findings in
/// it are treated as no error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorCategory {
    Medications,
    MedicalConditions,
    ReportsDiagnosis,
    ProceduresTreatments,
    PlansRecommendations,
    MedicalDevices,
    Others,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 7] = [
        Self::Medications,
        Self::MedicalConditions,
        Self::ReportsDiagnosis,
        Self::ProceduresTreatments,
        Self::PlansRecommendations,
        Self::MedicalDevices,
        Self::Others,
    ];

    pub fn index(self) -> u8 {
        self as u8 + 1
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Medications => "Medications",
            Self::MedicalConditions => "Medical Conditions, Virus or Bacteria",
            Self::ReportsDiagnosis => "Reports, Diagnosis and Monitoring",
            Self::ProceduresTreatments => "Clinical Procedures and Treatments",
            Self::PlansRecommendations => "Clinical Plans and Recommendations",
            Self::MedicalDevices => "Medical Devices",
            Self::Others => "Others including clarity/improper usage of terminology",
        }
    }

    pub fn is_discard(self) -> bool {
        self == Self::Others
    }

    /// Case-insensitive match on the full label; any label starting with
    /// "others" maps to the discard bucket.
    pub fn from_label(label: &str) -> Option<Self> {
        let label = label.trim();
        Self::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(label))
            .or_else(|| {
                label
                    .to_lowercase()
                    .starts_with("others")
                    .then_some(Self::Others)
            })
    }
}

impl Serialize for ErrorCategory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A curated few-shot example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub note: AnnotatedNote,
    pub expected: Prediction,
}

impl Exemplar {
    pub fn new(note: AnnotatedNote, expected: Prediction) -> Result<Self, PromptError> {
        let invalid = |message: String| PromptError::InvalidExemplar {
            text_id: note.text_id.clone(),
            message,
        };
        if let Finding::Error(report) = &expected.finding {
            let Some(original) = note.sentence(report.sentence_id) else {
                return Err(invalid(format!(
                    "error sentence id {} is not in the note",
                    report.sentence_id
                )));
            };
            if report.category.is_none() {
                return Err(invalid("error exemplar needs a category".into()));
            }
            if report.reason.as_deref().is_none_or(|r| r.trim().is_empty()) {
                return Err(invalid("error exemplar needs a reason".into()));
            }
            let corrected = report.corrected_sentence.trim();
            if corrected.is_empty() || corrected == original.trim() {
                return Err(invalid("correction must differ from the original sentence".into()));
            }
        }
        Ok(Self { note, expected })
    }

    fn render(&self) -> String {
        format!(
            "Example Clinical Report:\n{}\nOutput:\n{}\n\n",
            render_numbered(&self.note),
            self.expected.to_output_json()
        )
    }
}

/// Everything needed to render one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    /// Template text with `{taxonomy}`, `{exemplars}` and `{test_report}`.
    pub system_instructions: String,
    pub taxonomy: Vec<ErrorCategory>,
    pub exemplars: Vec<Exemplar>,
    pub test_text_id: String,
    pub test_note_rendered: String,
}

/// A rendered prompt ready to send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text_id: String,
    pub text: String,
}

impl RenderedPrompt {
    pub fn new(text_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            text_id: text_id.into(),
            text: text.into(),
        }
    }

    /// Lowercase hex SHA-256 of the prompt text.
    pub fn hash(&self) -> String {
        prompt_hash(&self.text)
    }
}

pub fn prompt_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl PromptBundle {
    pub fn render(&self) -> RenderedPrompt {
        let mut taxonomy = self.taxonomy.clone();
        taxonomy.sort();
        let taxonomy_block = taxonomy
            .iter()
            .map(|c| format!("{}. {}", c.index(), c.label()))
            .collect::<Vec<_>>()
            .join("\n");
        let exemplar_block: String = self.exemplars.iter().map(Exemplar::render).collect();
        let text = fill_template(&self.system_instructions, |name| match name {
            "taxonomy" => Some(taxonomy_block.as_str()),
            "exemplars" => Some(exemplar_block.as_str()),
            "test_report" => Some(self.test_note_rendered.as_str()),
            _ => None,
        });
        RenderedPrompt::new(self.test_text_id.clone(), text)
    }
}

/// Single-pass placeholder substitution; substituted text is never rescanned.
fn fill_template<'a>(template: &str, lookup: impl Fn(&str) -> Option<&'a str>) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let value = after
            .find('}')
            .and_then(|close| lookup(&after[..close]).map(|v| (v, close)));
        match value {
            Some((v, close)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn validate_template(template: &str) -> Result<(), PromptError> {
    for name in PLACEHOLDERS {
        if !template.contains(&format!("{{{name}}}")) {
            return Err(PromptError::MissingPlaceholder(name));
        }
    }
    Ok(())
}

pub fn load_template(path: Option<&Path>) -> Result<String, PromptError> {
    let template = match path {
        None => DEFAULT_TEMPLATE.to_owned(),
        Some(p) => fs::read_to_string(p).map_err(|source| PromptError::Io {
            path: p.display().to_string(),
            source,
        })?,
    };
    validate_template(&template)?;
    Ok(template)
}

/// Builds the prompt for `note` using the default template.
pub fn build_prompt(
    note: &AnnotatedNote,
    exemplars: &[Exemplar],
    taxonomy: &[ErrorCategory],
) -> Result<PromptBundle, PromptError> {
    build_prompt_with_template(DEFAULT_TEMPLATE, note, exemplars, taxonomy)
}

pub fn build_prompt_with_template(
    template: &str,
    note: &AnnotatedNote,
    exemplars: &[Exemplar],
    taxonomy: &[ErrorCategory],
) -> Result<PromptBundle, PromptError> {
    let mut distinct = taxonomy.to_vec();
    distinct.sort();
    distinct.dedup();
    if taxonomy.len() != 7 || distinct.len() != 7 {
        return Err(PromptError::TaxonomySize(taxonomy.len()));
    }
    validate_template(template)?;
    for ex in exemplars {
        Exemplar::new(ex.note.clone(), ex.expected.clone())?;
    }
    Ok(PromptBundle {
        system_instructions: template.to_owned(),
        taxonomy: taxonomy.to_vec(),
        exemplars: exemplars.to_vec(),
        test_text_id: note.text_id.clone(),
        test_note_rendered: render_numbered(note),
    })
}

/// One entry of the exemplar file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExemplarRecord {
    pub text_id: String,
    pub sentences: Value,
    pub error_sentence_id: i64,
    #[serde(default)]
    pub error_category: Option<String>,
    #[serde(default)]
    pub reason: Option<String>,
    #[serde(default)]
    pub corrected_sentence: Option<String>,
}

fn exemplar_from_record(index: usize, rec: ExemplarRecord) -> Result<Exemplar, PromptError> {
    let invalid = |message: String| PromptError::InvalidExemplar {
        text_id: rec.text_id.clone(),
        message,
    };
    let sentences = crate::corpus::sentences_from_json(&rec.sentences).map_err(invalid)?;
    let note = AnnotatedNote::new(rec.text_id.clone(), String::new(), sentences, None).map_err(
        |e| match e {
            CorpusError::Invariant { message, .. } => invalid(message),
            other => invalid(other.to_string()),
        },
    )?;
    let expected = match rec.error_sentence_id {
        -1 => Prediction::no_error(),
        id => {
            let id = u32::try_from(id).map_err(|_| invalid(format!("bad error_sentence_id {id}")))?;
            let label = rec.error_category.as_deref().unwrap_or_default();
            let category = if label.trim().is_empty() {
                None
            } else {
                Some(ErrorCategory::from_label(label).ok_or_else(|| {
                    PromptError::UnknownCategory {
                        index,
                        label: label.to_owned(),
                    }
                })?)
            };
            Prediction::error(
                id,
                category,
                rec.reason.as_deref(),
                rec.corrected_sentence.clone().unwrap_or_default(),
            )
        }
    };
    Exemplar::new(note, expected)
}

pub fn load_exemplars(path: &Path) -> Result<Vec<Exemplar>, PromptError> {
    let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let records: Vec<ExemplarRecord> =
        serde_json::from_str(&text).map_err(|source| PromptError::Json {
            path: path.display().to_string(),
            source,
        })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, rec)| exemplar_from_record(i, rec))
        .collect()
}

/// Draws `count` annotated notes at random and returns exemplar records with
/// the category and reason left blank. Those two fields must be filled in by
/// a person before [`load_exemplars`] will accept the file.
pub fn draw_exemplar_skeletons(
    notes: &[AnnotatedNote],
    count: usize,
    seed: u64,
) -> Vec<ExemplarRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    notes
        .iter()
        .filter(|n| n.truth.is_some())
        .collect::<Vec<_>>()
        .choose_multiple(&mut rng, count)
        .map(|note| {
            let truth = note.truth.as_ref().expect("filtered on truth");
            ExemplarRecord {
                text_id: note.text_id.clone(),
                sentences: Value::Array(
                    note.sentences()
                        .iter()
                        .map(|s| Value::String(s.text.clone()))
                        .collect(),
                ),
                error_sentence_id: truth.error_sentence_id(),
                error_category: truth.error.as_ref().map(|_| String::new()),
                reason: truth.error.as_ref().map(|_| String::new()),
                corrected_sentence: truth.corrected_sentence().map(str::to_owned),
            }
        })
        .collect()
}
