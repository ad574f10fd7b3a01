use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::consensus::read_predictions;
use crate::corpus::load_dataset_auto;
use crate::scoring::{score_run, Backends, MetricBackend, ScoreReport};

/// Run settings copied from the config snapshot next to a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub provider_names: Vec<String>,
    pub samples_per_note: usize,
    pub majority_threshold: usize,
    pub ensemble_partner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReportFile {
    #[serde(flatten)]
    pub report: ScoreReport,
    pub backends: Vec<MetricBackend>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<RunMetadata>,
}

fn snapshot_metadata(predictions: &Path) -> Option<RunMetadata> {
    let path = predictions.parent()?.join(super::run::CONFIG_SNAPSHOT);
    let text = fs::read_to_string(path).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    let config: super::RunConfig = serde_json::from_value(value.get("config")?.clone()).ok()?;
    Some(RunMetadata {
        config_hash: value.get("config_hash")?.as_str()?.to_owned(),
        provider_names: config.providers.iter().map(|p| p.name.clone()).collect(),
        samples_per_note: config.samples_per_note,
        majority_threshold: config.majority_threshold,
        ensemble_partner: config.ensemble_partner,
    })
}

/// Scores a predictions file against a dataset and optionally writes the
/// report as JSON.
pub fn cmd_score(
    predictions: &Path,
    dataset: &Path,
    backends: &Backends,
    report_out: Option<&Path>,
) -> Result<ScoreReportFile, CliError> {
    let preds = read_predictions(predictions)?;
    let notes = load_dataset_auto(dataset)?;
    let report = score_run(&preds, &notes, backends)?;
    let file = ScoreReportFile {
        report,
        backends: backends.describe(),
        metadata: snapshot_metadata(predictions),
    };
    if let Some(out) = report_out {
        let body = serde_json::to_string_pretty(&file).expect("report serializes");
        fs::write(out, body + "\n").map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    }
    Ok(file)
}
