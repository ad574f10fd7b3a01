use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::CliError;
use crate::corpus::load_dataset_auto;
use crate::prompting::{ErrorCategory, RenderedPrompt};
use crate::providers::{CompletionRequest, Provider, ProviderConfig};

const ANALYSIS_TEMPLATE: &str = "A clinical note sentence was corrected by a reviewer.\n\
Describe the kind of error that was fixed in a few words, as a short category name.\n\
Answer with the category name only.\n\n\
Original sentence: {error}\n\
Corrected sentence: {corrected}\n\
Category:";

/// Prompt asking for a free-form category of one (error, correction) pair.
pub fn analysis_prompt(text_id: &str, error_sentence: &str, corrected_sentence: &str) -> RenderedPrompt {
    let text = ANALYSIS_TEMPLATE
        .replace("{error}", error_sentence)
        .replace("{corrected}", corrected_sentence);
    RenderedPrompt::new(text_id, text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorAnalysisRecord {
    pub text_id: String,
    pub error_sentence: String,
    pub corrected_sentence: String,
    pub free_form_category: String,
    pub clustered_category: ErrorCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub category: ErrorCategory,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisFailure {
    pub text_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub records: Vec<ErrorAnalysisRecord>,
    pub failures: Vec<AnalysisFailure>,
    pub histogram: Vec<HistogramBin>,
}

/// Reads a JSON object mapping free-form labels to taxonomy labels. Keys
/// are matched case-insensitively.
pub fn load_cluster_map(path: &Path) -> Result<HashMap<String, ErrorCategory>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let raw: HashMap<String, String> =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    raw.into_iter()
        .map(|(free, label)| {
            ErrorCategory::from_label(&label)
                .map(|c| (free.trim().to_lowercase(), c))
                .ok_or_else(|| CliError::Config(format!("cluster map: `{label}` is not a taxonomy label")))
        })
        .collect()
}

fn free_form(raw: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    line.trim_end_matches('.').trim().to_owned()
}

fn cluster(map: &HashMap<String, ErrorCategory>, label: &str) -> ErrorCategory {
    map.get(&label.to_lowercase()).copied().unwrap_or(ErrorCategory::Others)
}

fn histogram(records: &[ErrorAnalysisRecord]) -> Vec<HistogramBin> {
    ErrorCategory::ALL
        .iter()
        .map(|&category| {
            let count = records.iter().filter(|r| r.clustered_category == category).count();
            let fraction = if records.is_empty() {
                0.0
            } else {
                count as f64 / records.len() as f64
            };
            HistogramBin {
                category,
                count,
                fraction,
            }
        })
        .collect()
}

/// Categorizes every ground-truth error in `dataset` through `provider`.
pub fn cmd_analyze(dataset: &Path, provider: &ProviderConfig, cluster_map: &Path) -> Result<AnalysisReport, CliError> {
    provider.validate(1)?;
    let map = load_cluster_map(cluster_map)?;
    let notes = load_dataset_auto(dataset)?;
    let client = Provider::from_config(provider)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for note in &notes {
        let Some(truth) = &note.truth else {
            return Err(CliError::Data(format!("note {} has no ground truth", note.text_id)));
        };
        let Some(fix) = &truth.error else { continue };
        let error_sentence = note.sentence(fix.sentence_id).unwrap_or_default().to_owned();
        let request = CompletionRequest {
            prompt: analysis_prompt(&note.text_id, &error_sentence, &fix.corrected),
            sample_count: 1,
            run_seed: 0,
        };
        match client.complete(&request) {
            Ok(result) => {
                let label = free_form(&result.raw_texts[0]);
                records.push(ErrorAnalysisRecord {
                    text_id: note.text_id.clone(),
                    clustered_category: cluster(&map, &label),
                    free_form_category: label,
                    error_sentence,
                    corrected_sentence: fix.corrected.clone(),
                });
            }
            Err(e) => {
                log::warn!("analysis of {} failed: {e}", note.text_id);
                failures.push(AnalysisFailure {
                    text_id: note.text_id.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    let histogram = histogram(&records);
    Ok(AnalysisReport {
        records,
        failures,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_form_takes_first_line() {
        assert_eq!(free_form("\n  Medical device substitution.\nmore"), "Medical device substitution");
        assert_eq!(free_form(""), "");
    }

    #[test]
    fn unmapped_goes_to_others() {
        let map = HashMap::from([("dose change".to_owned(), ErrorCategory::Medications)]);
        assert_eq!(cluster(&map, "Dose Change"), ErrorCategory::Medications);
        assert_eq!(cluster(&map, "spelling"), ErrorCategory::Others);
    }
}
