//! Results aggregation: m-of-k voting over samples from one model, agreement
//! gating against a second model, and choice of the corrected sentence.
//!
//! The vote key is the predicted error sentence id, with "no error" as its own
//! key. A key wins when it has the most votes and at least `m` of them; equal
//! top counts prefer "no error", then the smallest id. Anything the ensemble
//! cannot agree on becomes a no-error prediction.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedNote, GroundTruth, SentenceCorrection};
use crate::outparse::{Finding, Prediction};
use crate::scoring::rouge1_f;

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("vote bundle for `{0}` is empty")]
    NoVotes(String),
    #[error("majority threshold {m} is outside 1..={k}")]
    Threshold { m: usize, k: usize },
    #[error("votes for `{expected}` include a vote for `{found}`")]
    NoteMismatch { expected: String, found: String },
    #[error("no candidate corrections to choose from")]
    NoCandidates,
    #[error("predictions file {path}: {message}")]
    File { path: String, message: String },
}

/// k sampled predictions for one note plus the threshold m.
#[derive(Debug, Clone)]
pub struct VoteBundle {
    pub note_ref: String,
    pub votes: Vec<Prediction>,
    pub majority_threshold: usize,
}

impl VoteBundle {
    pub fn new(
        note_ref: impl Into<String>,
        votes: Vec<Prediction>,
        majority_threshold: usize,
    ) -> Result<Self, ConsensusError> {
        let note_ref = note_ref.into();
        if votes.is_empty() {
            return Err(ConsensusError::NoVotes(note_ref));
        }
        if majority_threshold == 0 || majority_threshold > votes.len() {
            return Err(ConsensusError::Threshold {
                m: majority_threshold,
                k: votes.len(),
            });
        }
        if let Some(stray) = votes.iter().find(|v| v.provenance.text_id != note_ref) {
            return Err(ConsensusError::NoteMismatch {
                expected: note_ref,
                found: stray.provenance.text_id.clone(),
            });
        }
        Ok(Self {
            note_ref,
            votes,
            majority_threshold,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusResult {
    pub note_ref: String,
    pub decided: bool,
    /// Winning key; `None` when undecided or when the majority says no error.
    pub error_sentence: Option<u32>,
    pub supporting_votes: Vec<Prediction>,
    pub candidate_corrections: Vec<String>,
}

impl ConsensusResult {
    pub fn error_sentence_id(&self) -> i64 {
        self.error_sentence.map_or(-1, i64::from)
    }
}

/// The post-aggregation answer for one note.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalPrediction {
    pub text_id: String,
    pub correction: Option<SentenceCorrection>,
}

impl FinalPrediction {
    pub fn no_error(text_id: impl Into<String>) -> Self {
        Self {
            text_id: text_id.into(),
            correction: None,
        }
    }

    pub fn error(text_id: impl Into<String>, sentence_id: u32, corrected: impl Into<String>) -> Self {
        Self {
            text_id: text_id.into(),
            correction: Some(SentenceCorrection {
                sentence_id,
                corrected: corrected.into(),
            }),
        }
    }

    pub fn error_flag(&self) -> u8 {
        u8::from(self.correction.is_some())
    }

    pub fn error_sentence_id(&self) -> i64 {
        self.correction.as_ref().map_or(-1, |c| i64::from(c.sentence_id))
    }

    pub fn corrected_sentence(&self) -> Option<&str> {
        self.correction.as_ref().map(|c| c.corrected.as_str())
    }

    /// The same decision viewed as a reference annotation.
    pub fn as_truth(&self) -> GroundTruth {
        GroundTruth {
            error: self.correction.clone(),
        }
    }
}

/// Majority vote over the bundle.
pub fn self_consistency(bundle: &VoteBundle) -> ConsensusResult {
    let mut counts: BTreeMap<Option<u32>, usize> = BTreeMap::new();
    for vote in &bundle.votes {
        *counts.entry(vote.sentence_id()).or_default() += 1;
    }
    // BTreeMap iterates None first, then ids ascending, so the first maximum
    // is the tie-break winner.
    let (winner, top) = counts.iter().fold((None, 0), |best, (key, &count)| {
        if count > best.1 {
            (*key, count)
        } else {
            best
        }
    });
    if top < bundle.majority_threshold {
        return ConsensusResult {
            note_ref: bundle.note_ref.clone(),
            decided: false,
            error_sentence: None,
            supporting_votes: Vec::new(),
            candidate_corrections: Vec::new(),
        };
    }
    let supporting_votes: Vec<Prediction> = bundle
        .votes
        .iter()
        .filter(|v| v.sentence_id() == winner)
        .cloned()
        .collect();
    let candidate_corrections = supporting_votes
        .iter()
        .filter_map(|v| v.corrected_sentence().map(str::to_owned))
        .collect();
    ConsensusResult {
        note_ref: bundle.note_ref.clone(),
        decided: true,
        error_sentence: winner,
        supporting_votes,
        candidate_corrections,
    }
}

/// The candidate closest to the original sentence by ROUGE-1 F1; the first
/// one wins ties.
pub fn select_correction<'a>(
    candidates: &'a [String],
    error_sentence: &str,
) -> Result<&'a str, ConsensusError> {
    let mut best: Option<(&str, f64)> = None;
    for candidate in candidates {
        let score = rouge1_f(candidate, error_sentence);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((candidate, score));
        }
    }
    best.map(|(c, _)| c).ok_or(ConsensusError::NoCandidates)
}

fn check_note(found: &str, note: &AnnotatedNote) -> Result<(), ConsensusError> {
    if found != note.text_id {
        return Err(ConsensusError::NoteMismatch {
            expected: note.text_id.clone(),
            found: found.to_owned(),
        });
    }
    Ok(())
}

fn finalize(note: &AnnotatedNote, sentence_id: u32, candidates: &[String]) -> FinalPrediction {
    let Some(original) = note.sentence(sentence_id) else {
        return FinalPrediction::no_error(&note.text_id);
    };
    match select_correction(candidates, original) {
        Ok(chosen) => FinalPrediction::error(&note.text_id, sentence_id, chosen),
        Err(_) => FinalPrediction::no_error(&note.text_id),
    }
}

/// Accepts the consensus only when it is decided and the partner model names
/// the same key; the correction is then chosen from the supporting votes and
/// the partner's own correction.
pub fn ensemble(
    consensus: &ConsensusResult,
    partner: &Prediction,
    note: &AnnotatedNote,
) -> Result<FinalPrediction, ConsensusError> {
    check_note(&consensus.note_ref, note)?;
    check_note(&partner.provenance.text_id, note)?;
    if !consensus.decided || consensus.error_sentence != partner.sentence_id() {
        return Ok(FinalPrediction::no_error(&note.text_id));
    }
    let Some(sentence_id) = consensus.error_sentence else {
        return Ok(FinalPrediction::no_error(&note.text_id));
    };
    let mut candidates = consensus.candidate_corrections.clone();
    candidates.extend(partner.corrected_sentence().map(str::to_owned));
    Ok(finalize(note, sentence_id, &candidates))
}

/// Final prediction from the consensus alone (no partner model).
pub fn consensus_final(
    consensus: &ConsensusResult,
    note: &AnnotatedNote,
) -> Result<FinalPrediction, ConsensusError> {
    check_note(&consensus.note_ref, note)?;
    Ok(match (consensus.decided, consensus.error_sentence) {
        (true, Some(id)) => finalize(note, id, &consensus.candidate_corrections),
        _ => FinalPrediction::no_error(&note.text_id),
    })
}

/// Passthrough for single-sample, single-model runs.
pub fn single_model_final(pred: &Prediction) -> FinalPrediction {
    let text_id = pred.provenance.text_id.clone();
    match &pred.finding {
        Finding::NoError => FinalPrediction::no_error(text_id),
        Finding::Error(e) => FinalPrediction::error(text_id, e.sentence_id, e.corrected_sentence.clone()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    text_id: String,
    error_flag: u8,
    error_sentence_id: i64,
    corrected_sentence: String,
}

const NA: &str = "NA";

pub fn write_predictions(path: &Path, preds: &[FinalPrediction]) -> Result<(), ConsensusError> {
    let file_err = |message: String| ConsensusError::File {
        path: path.display().to_string(),
        message,
    };
    let file = File::create(path).map_err(|e| file_err(e.to_string()))?;
    let mut writer = csv::Writer::from_writer(file);
    for p in preds {
        writer
            .serialize(PredictionRow {
                text_id: p.text_id.clone(),
                error_flag: p.error_flag(),
                error_sentence_id: p.error_sentence_id(),
                corrected_sentence: p.corrected_sentence().unwrap_or(NA).to_owned(),
            })
            .map_err(|e| file_err(e.to_string()))?;
    }
    writer.flush().map_err(|e| file_err(e.to_string()))
}

pub fn read_predictions(path: &Path) -> Result<Vec<FinalPrediction>, ConsensusError> {
    let file_err = |message: String| ConsensusError::File {
        path: path.display().to_string(),
        message,
    };
    let file = File::open(path).map_err(|e| file_err(e.to_string()))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut preds = Vec::new();
    for row in reader.deserialize::<PredictionRow>() {
        let row = row.map_err(|e| file_err(e.to_string()))?;
        let correction = (row.corrected_sentence != NA).then_some(row.corrected_sentence.as_str());
        let truth = GroundTruth::from_fields(i64::from(row.error_flag), row.error_sentence_id, correction)
            .map_err(|(field, msg)| file_err(format!("row `{}`, {field}: {msg}", row.text_id)))?;
        preds.push(FinalPrediction {
            text_id: row.text_id,
            correction: truth.error,
        });
    }
    Ok(preds)
}
