//! Command implementations behind the `errcorr` binary: `run`, `aggregate`,
//! `score` and `analyze`.

mod analyze;
mod config;
mod run;
mod score;

pub use analyze::{
    analysis_prompt, cmd_analyze, load_cluster_map, AnalysisFailure, AnalysisReport, ErrorAnalysisRecord,
    HistogramBin,
};
pub use config::{Overrides, RunConfig};
pub use run::{
    aggregate_notes, cmd_aggregate, cmd_run, AggregationPlan, RunSummary, CONFIG_SNAPSHOT, LEDGER_FILE,
    PREDICTIONS_FILE,
};
pub use score::{cmd_score, RunMetadata, ScoreReportFile};

use thiserror::Error;

use crate::consensus::ConsensusError;
use crate::corpus::CorpusError;
use crate::ledger::LedgerError;
use crate::prompting::PromptError;
use crate::providers::ProviderError;
use crate::scoring::ScoringError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("provider exhausted: {0}")]
    Provider(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Provider(_) => 3,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<LedgerError> for CliError {
    fn from(e: LedgerError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ConsensusError> for CliError {
    fn from(e: ConsensusError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ScoringError> for CliError {
    fn from(e: ScoringError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Config { .. } | ProviderError::MissingApiKey { .. } => {
                Self::Config(e.to_string())
            }
            ProviderError::Mock(crate::providers::mock::MockError::Load { .. }) => {
                Self::Config(e.to_string())
            }
            other => Self::Provider(other.to_string()),
        }
    }
}
