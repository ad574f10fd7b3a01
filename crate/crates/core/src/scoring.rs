//! Task metrics: detection accuracy, sentence-id accuracy, and the corrected
//! sentence aggregate (ROUGE-1 F1 computed here; BERTScore and BLEURT-20
//! fetched from the neural scorer sidecar when one is reachable).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::FinalPrediction;
use crate::corpus::{AnnotatedNote, GroundTruth};
use crate::par::{self, Execution};

/// Pairs per sidecar request.
pub const SIDECAR_BATCH_CAP: usize = 256;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("duplicate text_id(s) in {side}: {ids:?}")]
    Duplicate { side: &'static str, ids: Vec<String> },
    #[error("predictions and references do not align; missing predictions {missing:?}, unknown predictions {unknown:?}")]
    Unmatched {
        missing: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("reference `{0}` carries no ground truth")]
    MissingTruth(String),
    #[error("neural scorer: {0}")]
    Sidecar(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
}

fn is_strip_char(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '–' | '—' | '…' | '«' | '»')
}

/// Lowercases, splits on whitespace, strips leading/trailing punctuation from
/// each token and drops tokens left empty.
pub fn tokenize(text: &str) -> TokenizedText {
    TokenizedText {
        tokens: text
            .split_whitespace()
            .map(|t| t.trim_matches(is_strip_char).to_lowercase())
            .filter(|t| !t.is_empty())
            .collect(),
    }
}

/// Unigram F1 with multiset overlap. Two empty texts score 1, one empty text
/// scores 0.
pub fn rouge1_f(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate).tokens;
    let refs = tokenize(reference).tokens;
    match (cand.is_empty(), refs.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &refs {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &cand {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = O/|cand| and R = O/|ref|
    (2 * overlap) as f64 / (cand.len() + refs.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Rouge1f,
    Bertscore,
    Bleurt20,
}

impl MetricName {
    pub const NEURAL: [MetricName; 2] = [Self::Bertscore, Self::Bleurt20];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rouge1f => "rouge1f",
            Self::Bertscore => "bertscore",
            Self::Bleurt20 => "bleurt20",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Availability {
    Native,
    External,
    Unavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricBackend {
    pub name: MetricName,
    pub availability: Availability,
}

/// A source of learned sentence-pair metrics.
pub trait NeuralMetric: Send + Sync {
    /// Scores `(candidate, reference)` pairs in order, values in [0, 1].
    fn score_pairs(&self, metric: MetricName, pairs: &[(String, String)]) -> Result<Vec<f64>, ScoringError>;
}

#[derive(Serialize)]
struct WirePair<'a> {
    candidate: &'a str,
    reference: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    metric: MetricName,
    pairs: Vec<WirePair<'a>>,
}

#[derive(Deserialize)]
struct WireResponse {
    scores: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
pub struct SidecarHealth {
    pub status: String,
    #[serde(default)]
    pub models: serde_json::Value,
}

/// HTTP client for the sidecar's `POST /score` and `GET /health`.
pub struct SidecarClient {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl SidecarClient {
    pub fn new(base_url: &str) -> Result<Self, ScoringError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| ScoringError::Sidecar(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_owned(),
            client,
        })
    }

    pub fn health(&self) -> Result<SidecarHealth, ScoringError> {
        self.client
            .get(format!("{}/health", self.base_url))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| ScoringError::Sidecar(e.to_string()))
    }
}

impl NeuralMetric for SidecarClient {
    fn score_pairs(&self, metric: MetricName, pairs: &[(String, String)]) -> Result<Vec<f64>, ScoringError> {
        let mut scores = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(SIDECAR_BATCH_CAP) {
            let body = WireRequest {
                metric,
                pairs: chunk
                    .iter()
                    .map(|(c, r)| WirePair {
                        candidate: c,
                        reference: r,
                    })
                    .collect(),
            };
            let resp: WireResponse = self
                .client
                .post(format!("{}/score", self.base_url))
                .json(&body)
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json())
                .map_err(|e| ScoringError::Sidecar(e.to_string()))?;
            if resp.scores.len() != chunk.len() {
                return Err(ScoringError::Sidecar(format!(
                    "asked for {} scores, got {}",
                    chunk.len(),
                    resp.scores.len()
                )));
            }
            scores.extend(resp.scores);
        }
        Ok(scores)
    }
}

/// Metric backends in use for a scoring run. ROUGE-1 F1 is always available.
#[derive(Default)]
pub struct Backends {
    neural: Option<Box<dyn NeuralMetric>>,
}

impl Backends {
    pub fn rouge_only() -> Self {
        Self { neural: None }
    }

    pub fn with_neural(neural: Box<dyn NeuralMetric>) -> Self {
        Self {
            neural: Some(neural),
        }
    }

    pub fn describe(&self) -> Vec<MetricBackend> {
        let external = if self.neural.is_some() {
            Availability::External
        } else {
            Availability::Unavailable
        };
        vec![
            MetricBackend {
                name: MetricName::Rouge1f,
                availability: Availability::Native,
            },
            MetricBackend {
                name: MetricName::Bertscore,
                availability: external,
            },
            MetricBackend {
                name: MetricName::Bleurt20,
                availability: external,
            },
        ]
    }
}

/// Per-component averages; `None` marks a component that could not be
/// computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task3Components {
    pub rouge1f: Option<f64>,
    pub bertscore_f1: Option<f64>,
    pub bleurt20: Option<f64>,
}

impl Task3Components {
    fn available(&self) -> Vec<(MetricName, f64)> {
        [
            (MetricName::Rouge1f, self.rouge1f),
            (MetricName::Bertscore, self.bertscore_f1),
            (MetricName::Bleurt20, self.bleurt20),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v)))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub task1_accuracy: f64,
    pub task2_accuracy: f64,
    pub task3_aggregate: f64,
    pub task3_components: Task3Components,
    /// Components averaged into `task3_aggregate`.
    pub task3_basis: Vec<MetricName>,
    pub n_samples: usize,
}

/// How a prediction/reference pair compares at the flag level.
enum PairCase<'a> {
    BothClean,
    Mismatch,
    BothError { candidate: &'a str, reference: &'a str },
}

fn pair_case<'a>(pred: &'a FinalPrediction, truth: &'a GroundTruth) -> PairCase<'a> {
    match (pred.corrected_sentence(), truth.corrected_sentence()) {
        (None, None) => PairCase::BothClean,
        (Some(candidate), Some(reference)) => PairCase::BothError {
            candidate,
            reference,
        },
        _ => PairCase::Mismatch,
    }
}

/// Corrected-sentence score for one pair: 1 when both sides say no error,
/// 0 on a flag mismatch, otherwise the mean of the available metrics.
pub fn nlg_pair_score(pred: &FinalPrediction, truth: &GroundTruth, backends: &Backends) -> f64 {
    match pair_case(pred, truth) {
        PairCase::BothClean => 1.0,
        PairCase::Mismatch => 0.0,
        PairCase::BothError {
            candidate,
            reference,
        } => {
            let mut values = vec![rouge1_f(candidate, reference)];
            if let Some(neural) = &backends.neural {
                let pair = [(candidate.to_owned(), reference.to_owned())];
                for metric in MetricName::NEURAL {
                    match neural.score_pairs(metric, &pair) {
                        Ok(v) => values.push(v[0].clamp(0.0, 1.0)),
                        Err(e) => log::warn!("{} unavailable: {e}", metric.as_str()),
                    }
                }
            }
            values.iter().sum::<f64>() / values.len() as f64
        }
    }
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

fn find_duplicates<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut dups: Vec<String> = ids.filter(|id| !seen.insert(*id)).map(str::to_owned).collect();
    dups.sort();
    dups.dedup();
    dups
}

pub fn score_run(
    preds: &[FinalPrediction],
    refs: &[AnnotatedNote],
    backends: &Backends,
) -> Result<ScoreReport, ScoringError> {
    score_run_with(Execution::default(), preds, refs, backends)
}

/// Scores aligned predictions. Samples are processed in `text_id` order so the
/// report does not depend on input order.
pub fn score_run_with(
    exec: Execution,
    preds: &[FinalPrediction],
    refs: &[AnnotatedNote],
    backends: &Backends,
) -> Result<ScoreReport, ScoringError> {
    let dup_preds = find_duplicates(preds.iter().map(|p| p.text_id.as_str()));
    if !dup_preds.is_empty() {
        return Err(ScoringError::Duplicate {
            side: "predictions",
            ids: dup_preds,
        });
    }
    let dup_refs = find_duplicates(refs.iter().map(|n| n.text_id.as_str()));
    if !dup_refs.is_empty() {
        return Err(ScoringError::Duplicate {
            side: "references",
            ids: dup_refs,
        });
    }
    let truth: BTreeMap<&str, &GroundTruth> = refs
        .iter()
        .map(|n| {
            n.truth
                .as_ref()
                .map(|t| (n.text_id.as_str(), t))
                .ok_or_else(|| ScoringError::MissingTruth(n.text_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let by_id: HashMap<&str, &FinalPrediction> =
        preds.iter().map(|p| (p.text_id.as_str(), p)).collect();
    let missing: Vec<String> = truth
        .keys()
        .filter(|id| !by_id.contains_key(*id))
        .map(|id| id.to_string())
        .collect();
    let mut unknown: Vec<String> = by_id
        .keys()
        .filter(|id| !truth.contains_key(*id))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        unknown.sort();
        return Err(ScoringError::Unmatched { missing, unknown });
    }

    let pairs: Vec<(&FinalPrediction, &GroundTruth)> =
        truth.iter().map(|(id, t)| (by_id[id], *t)).collect();
    let n = pairs.len();
    if n == 0 {
        return Ok(ScoreReport {
            task1_accuracy: 0.0,
            task2_accuracy: 0.0,
            task3_aggregate: 0.0,
            task3_components: Task3Components {
                rouge1f: None,
                bertscore_f1: None,
                bleurt20: None,
            },
            task3_basis: Vec::new(),
            n_samples: 0,
        });
    }

    let task1_correct = pairs.iter().filter(|(p, t)| p.error_flag() == t.error_flag()).count();
    let task2_correct = pairs
        .iter()
        .filter(|(p, t)| p.error_sentence_id() == t.error_sentence_id())
        .count();

    let rouge = par::map(exec, &pairs, |(p, t)| match pair_case(p, t) {
        PairCase::BothClean => 1.0,
        PairCase::Mismatch => 0.0,
        PairCase::BothError {
            candidate,
            reference,
        } => rouge1_f(candidate, reference),
    });

    let both_error: Vec<(usize, (String, String))> = pairs
        .iter()
        .enumerate()
        .filter_map(|(i, (p, t))| match pair_case(p, t) {
            PairCase::BothError {
                candidate,
                reference,
            } => Some((i, (candidate.to_owned(), reference.to_owned()))),
            _ => None,
        })
        .collect();
    let neural_component = |metric: MetricName| -> Option<f64> {
        let neural = backends.neural.as_ref()?;
        let batch: Vec<(String, String)> = both_error.iter().map(|(_, p)| p.clone()).collect();
        let scores = if batch.is_empty() {
            Vec::new()
        } else {
            match neural.score_pairs(metric, &batch) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("{} unavailable: {e}", metric.as_str());
                    return None;
                }
            }
        };
        let mut per_sample: Vec<f64> = pairs
            .iter()
            .map(|(p, t)| match pair_case(p, t) {
                PairCase::BothClean => 1.0,
                _ => 0.0,
            })
            .collect();
        for ((i, _), s) in both_error.iter().zip(scores) {
            per_sample[*i] = s.clamp(0.0, 1.0);
        }
        Some(mean(per_sample.into_iter(), n))
    };

    let components = Task3Components {
        rouge1f: Some(mean(rouge.into_iter(), n)),
        bertscore_f1: neural_component(MetricName::Bertscore),
        bleurt20: neural_component(MetricName::Bleurt20),
    };
    let available = components.available();
    let task3_aggregate =
        available.iter().map(|(_, v)| v).sum::<f64>() / available.len() as f64;
    Ok(ScoreReport {
        task1_accuracy: task1_correct as f64 / n as f64,
        task2_accuracy: task2_correct as f64 / n as f64,
        task3_aggregate,
        task3_components: components,
        task3_basis: available.into_iter().map(|(n, _)| n).collect(),
        n_samples: n,
    })
}
