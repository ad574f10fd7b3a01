//! Offline provider. A script either replays recorded outputs keyed by prompt
//! hash and slot, or synthesizes outputs from ground truth with controllable
//! noise. The output depends only on the prompt hash, the slot seed and the
//! script, so it is identical across runs and platforms.
//!
//! The slot seed for sample `i` of a request is `run_seed + i`; with the
//! default run seed of 0 a replay slot is simply the sample index.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{load_dataset_auto, AnnotatedNote, GroundTruth};
use crate::ledger::LedgerRecord;
use crate::outparse::Prediction;
use crate::prompting::{ErrorCategory, RenderedPrompt};

#[derive(Debug, Error)]
pub enum MockError {
    #[error("strict replay has no output for prompt {prompt_hash} slot {slot}")]
    NotFound { prompt_hash: String, slot: u64 },
    #[error("mock script {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Debug, Clone, Deserialize)]
pub struct ReplayEntry {
    pub prompt_hash: String,
    pub sample_index: u64,
    pub raw_text: String,
    #[serde(default)]
    pub provider_name: Option<String>,
    #[serde(default)]
    pub text_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SyntheticParams {
    /// Chance that an output disagrees with the truth.
    #[serde(default)]
    pub flip_probability: f64,
    /// Chance that the JSON is wrapped in conversational prose.
    #[serde(default)]
    pub prose_probability: f64,
    /// Dataset with ground truth, relative to the script file. Notes absent
    /// from it are treated as error-free and read from the prompt.
    #[serde(default)]
    pub oracle_dataset: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
enum ScriptFile {
    Replay {
        #[serde(default = "default_strict")]
        strict: bool,
        #[serde(default)]
        fallback: Option<String>,
        entries: Vec<ReplayEntry>,
    },
    Synthetic { generator_params: SyntheticParams },
}

fn default_strict() -> bool {
    true
}

const NON_STRICT_FALLBACK: &str = r#"{"Error Sentence ID": -1}"#;

#[derive(Debug, Clone)]
pub enum MockScript {
    Replay {
        strict: bool,
        fallback: String,
        table: HashMap<(String, u64), String>,
    },
    Synthetic {
        params: SyntheticParams,
        oracle: HashMap<String, AnnotatedNote>,
    },
}

impl MockScript {
    /// Loads a script file. Replay entries tagged with another provider's
    /// name are skipped.
    pub fn load(path: &Path, provider_name: &str) -> Result<Self, MockError> {
        let load_err = |message: String| MockError::Load {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let file: ScriptFile = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        match file {
            ScriptFile::Replay {
                strict,
                fallback,
                entries,
            } => Ok(Self::replay(
                entries
                    .into_iter()
                    .filter(|e| e.provider_name.as_deref().is_none_or(|n| n == provider_name)),
                strict,
                fallback,
            )),
            ScriptFile::Synthetic { generator_params } => {
                let mut oracle = HashMap::new();
                if let Some(rel) = &generator_params.oracle_dataset {
                    let base = path.parent().unwrap_or(Path::new("."));
                    let notes =
                        load_dataset_auto(&base.join(rel)).map_err(|e| load_err(e.to_string()))?;
                    oracle = notes.into_iter().map(|n| (n.text_id.clone(), n)).collect();
                }
                Ok(Self::Synthetic {
                    params: generator_params,
                    oracle,
                })
            }
        }
    }

    pub fn replay(
        entries: impl IntoIterator<Item = ReplayEntry>,
        strict: bool,
        fallback: Option<String>,
    ) -> Self {
        let table = entries
            .into_iter()
            .map(|e| ((e.prompt_hash, e.sample_index), e.raw_text))
            .collect();
        Self::Replay {
            strict,
            fallback: fallback.unwrap_or_else(|| NON_STRICT_FALLBACK.to_owned()),
            table,
        }
    }

    /// Strict replay of the successful records one provider left in a run
    /// ledger.
    pub fn replay_from_ledger(records: &[LedgerRecord], provider_name: &str) -> Self {
        Self::replay(
            records
                .iter()
                .filter(|r| r.provider_name == provider_name && r.is_success())
                .map(|r| ReplayEntry {
                    prompt_hash: r.prompt_hash.clone(),
                    sample_index: u64::from(r.sample_index),
                    raw_text: r.raw_text.clone(),
                    provider_name: Some(r.provider_name.clone()),
                    text_id: Some(r.text_id.clone()),
                }),
            true,
            None,
        )
    }
}

fn slot_rng(prompt_hash: &str, slot: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(prompt_hash.as_bytes());
    hasher.update(slot.to_le_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Recovers the trailing `<id> <text>` block of a rendered prompt.
fn trailing_note(prompt: &RenderedPrompt) -> Option<AnnotatedNote> {
    let mut lines: Vec<&str> = prompt
        .text
        .lines()
        .rev()
        .skip_while(|l| !starts_numbered(l))
        .take_while(|l| starts_numbered(l))
        .collect();
    lines.reverse();
    let texts = lines
        .iter()
        .map(|l| l.split_once(' ').map_or("", |(_, t)| t));
    AnnotatedNote::from_texts(prompt.text_id.clone(), texts, None).ok()
}

fn starts_numbered(line: &str) -> bool {
    line.split_once(' ')
        .is_some_and(|(id, rest)| !id.is_empty() && id.bytes().all(|b| b.is_ascii_digit()) && !rest.trim().is_empty())
}

fn synthesize(params: &SyntheticParams, oracle: &HashMap<String, AnnotatedNote>, prompt: &RenderedPrompt, slot: u64) -> String {
    let mut rng = slot_rng(&prompt.hash(), slot);
    let note = oracle.get(&prompt.text_id).cloned().or_else(|| trailing_note(prompt));
    let Some(note) = note else {
        return NON_STRICT_FALLBACK.to_owned();
    };
    let truth = note.truth.clone().unwrap_or_else(GroundTruth::no_error);
    let flip = rng.random_bool(params.flip_probability.clamp(0.0, 1.0));
    let categories = &ErrorCategory::ALL[..6];
    let pred = match (&truth.error, flip) {
        (None, false) => Prediction::no_error(),
        (Some(e), false) => Prediction::error(
            e.sentence_id,
            Some(*categories.choose(&mut rng).expect("non-empty")),
            Some("Inconsistent with the rest of the report."),
            e.corrected.clone(),
        ),
        (truth_error, true) => {
            let n = note.sentences().len() as u32;
            let others: Vec<u32> = (0..n)
                .filter(|id| truth_error.as_ref().is_none_or(|e| e.sentence_id != *id))
                .collect();
            let go_clean = truth_error.is_some() && (others.is_empty() || rng.random_bool(0.5));
            if go_clean {
                Prediction::no_error()
            } else {
                let id = *others.choose(&mut rng).expect("at least one other sentence");
                let original = note.sentence(id).expect("id in range");
                Prediction::error(
                    id,
                    Some(*categories.choose(&mut rng).expect("non-empty")),
                    Some("Appears inconsistent."),
                    format!("{original} Revised."),
                )
            }
        }
    };
    let json = pred.to_output_json();
    if rng.random_bool(params.prose_probability.clamp(0.0, 1.0)) {
        format!("Here is my assessment of the report:\n{json}\nLet me know if anything is unclear.")
    } else {
        json
    }
}

pub fn mock_respond(prompt: &RenderedPrompt, run_seed: u64, script: &MockScript) -> Result<String, MockError> {
    match script {
        MockScript::Replay {
            strict,
            fallback,
            table,
        } => {
            let hash = prompt.hash();
            match table.get(&(hash.clone(), run_seed)) {
                Some(text) => Ok(text.clone()),
                None if *strict => Err(MockError::NotFound {
                    prompt_hash: hash,
                    slot: run_seed,
                }),
                None => Ok(fallback.clone()),
            }
        }
        MockScript::Synthetic { params, oracle } => Ok(synthesize(params, oracle, prompt, run_seed)),
    }
}
