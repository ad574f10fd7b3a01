use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;

use super::{CliError, RunConfig};
use crate::consensus::{
    consensus_final, ensemble, self_consistency, single_model_final, write_predictions, FinalPrediction,
    VoteBundle,
};
use crate::corpus::{load_dataset_auto, AnnotatedNote};
use crate::ledger::{read_ledger, LedgerRecord, LedgerWriter};
use crate::outparse::{interpret, Prediction, Provenance};
use crate::par::{self, Execution};
use crate::prompting::{build_prompt_with_template, load_exemplars, load_template, ErrorCategory, Exemplar};
use crate::providers::{CompletionRequest, Provider};

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const CONFIG_SNAPSHOT: &str = "config.json";

/// Which ledger slots make up one note's votes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationPlan {
    pub consistency: String,
    pub partner: Option<String>,
    pub samples: usize,
    pub majority: usize,
}

impl AggregationPlan {
    pub fn from_config(config: &RunConfig) -> Result<Self, CliError> {
        config.validate_plan()?;
        Ok(Self {
            consistency: config.consistency()?.name.clone(),
            partner: config.partner()?.map(|p| p.name.clone()),
            samples: config.samples_per_note,
            majority: config.majority_threshold,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub ledger_path: PathBuf,
    pub predictions_path: PathBuf,
    pub notes_total: usize,
    pub notes_skipped: usize,
    /// Provider requests issued by this invocation.
    pub provider_calls: usize,
    pub failed_notes: Vec<String>,
}

#[derive(Default)]
struct ProviderSlots<'a> {
    ok: HashMap<u32, &'a LedgerRecord>,
    failed: bool,
}

enum Slots<'a> {
    Ready(Vec<&'a LedgerRecord>),
    Failed,
    Missing,
}

type LedgerIndex<'a> = HashMap<(&'a str, &'a str), ProviderSlots<'a>>;

fn index_ledger(records: &[LedgerRecord]) -> LedgerIndex<'_> {
    let mut index: LedgerIndex<'_> = HashMap::new();
    for rec in records {
        let slots = index
            .entry((rec.text_id.as_str(), rec.provider_name.as_str()))
            .or_default();
        if rec.is_success() {
            slots.ok.insert(rec.sample_index, rec);
        } else {
            slots.failed = true;
        }
    }
    index
}

fn slots<'a>(index: &LedgerIndex<'a>, text_id: &str, provider: &str, needed: usize) -> Slots<'a> {
    let Some(entry) = index.get(&(text_id, provider)) else {
        return Slots::Missing;
    };
    let found: Option<Vec<_>> = (0..needed as u32).map(|i| entry.ok.get(&i).copied()).collect();
    match (found, entry.failed) {
        (Some(records), _) => Slots::Ready(records),
        (None, true) => Slots::Failed,
        (None, false) => Slots::Missing,
    }
}

fn votes_from(records: &[&LedgerRecord], note: &AnnotatedNote) -> Vec<Prediction> {
    records
        .iter()
        .map(|r| {
            interpret(
                &r.raw_text,
                note,
                Provenance {
                    text_id: r.text_id.clone(),
                    provider_name: r.provider_name.clone(),
                    sample_index: r.sample_index,
                },
            )
        })
        .collect()
}

enum NoteDecision {
    Final(FinalPrediction),
    Missing(String),
}

fn decide(note: &AnnotatedNote, index: &LedgerIndex<'_>, plan: &AggregationPlan) -> Result<NoteDecision, CliError> {
    let primary = slots(index, &note.text_id, &plan.consistency, plan.samples);
    let partner = plan
        .partner
        .as_deref()
        .map(|name| slots(index, &note.text_id, name, 1));
    let primary = match primary {
        Slots::Missing => return Ok(NoteDecision::Missing(note.text_id.clone())),
        // the provider gave up on this note, so the partner was never asked
        Slots::Failed => return Ok(NoteDecision::Final(FinalPrediction::no_error(&note.text_id))),
        Slots::Ready(r) => r,
    };
    let partner_records = match partner {
        Some(Slots::Missing) => return Ok(NoteDecision::Missing(note.text_id.clone())),
        Some(Slots::Failed) => return Ok(NoteDecision::Final(FinalPrediction::no_error(&note.text_id))),
        Some(Slots::Ready(r)) => Some(r),
        None => None,
    };

    let votes = votes_from(&primary, note);
    let final_pred = match partner_records {
        None if plan.samples == 1 => single_model_final(&votes[0]),
        None => {
            let bundle = VoteBundle::new(&note.text_id, votes, plan.majority)?;
            consensus_final(&self_consistency(&bundle), note)?
        }
        Some(partner_records) => {
            let partner_vote = votes_from(&partner_records, note).remove(0);
            let bundle = VoteBundle::new(&note.text_id, votes, plan.majority)?;
            ensemble(&self_consistency(&bundle), &partner_vote, note)?
        }
    };
    Ok(NoteDecision::Final(final_pred))
}

/// Re-derives final predictions from recorded raw outputs. Notes whose
/// provider gave up become no-error; notes with no usable record are
/// reported together as an error.
pub fn aggregate_notes(
    exec: Execution,
    notes: &[AnnotatedNote],
    records: &[LedgerRecord],
    plan: &AggregationPlan,
) -> Result<Vec<FinalPrediction>, CliError> {
    let index = index_ledger(records);
    let decisions = par::try_map(exec, notes, |note| decide(note, &index, plan))?;
    let mut finals = Vec::with_capacity(notes.len());
    let mut missing = Vec::new();
    for d in decisions {
        match d {
            NoteDecision::Final(f) => finals.push(f),
            NoteDecision::Missing(id) => missing.push(id),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "ledger lacks samples for {} note(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(finals)
}

/// Offline re-aggregation of a ledger under `config`'s vote settings.
pub fn cmd_aggregate(ledger_path: &Path, config: &RunConfig, out: &Path) -> Result<Vec<FinalPrediction>, CliError> {
    let plan = AggregationPlan::from_config(config)?;
    let notes = load_dataset_auto(&config.dataset)?;
    let records = read_ledger(ledger_path)?;
    let finals = aggregate_notes(Execution::default(), &notes, &records, &plan)?;
    write_predictions(out, &finals)?;
    Ok(finals)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Reuses the newest run directory created for the same config hash, or
/// creates a fresh timestamped one.
fn run_directory(config: &RunConfig) -> Result<PathBuf, CliError> {
    let short = &config.hash()[..12];
    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let mut existing: Vec<PathBuf> = fs::read_dir(&config.output_dir)
        .map_err(io_err(&config.output_dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with(&format!("-{short}")))
        })
        .collect();
    existing.sort();
    if let Some(dir) = existing.pop() {
        return Ok(dir);
    }
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let dir = config.output_dir.join(format!("{stamp}-{short}"));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

struct RunContext<'a> {
    template: String,
    exemplars: Vec<Exemplar>,
    consistency: Provider,
    partner: Option<Provider>,
    samples: usize,
    run_seed: u64,
    ledger: &'a LedgerWriter,
    calls: AtomicUsize,
}

fn now_stamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Prompts every provider for one note and ledgers the outcome. Returns the
/// failure message if a provider gave up.
fn run_note(note: &AnnotatedNote, ctx: &RunContext<'_>) -> Result<Option<String>, CliError> {
    let prompt = build_prompt_with_template(&ctx.template, note, &ctx.exemplars, &ErrorCategory::ALL)?.render();
    let hash = prompt.hash();
    let mut records = Vec::new();
    let mut failure = None;
    let jobs = std::iter::once((&ctx.consistency, ctx.samples)).chain(ctx.partner.iter().map(|p| (p, 1)));
    for (provider, samples) in jobs {
        let request = CompletionRequest {
            prompt: prompt.clone(),
            sample_count: samples,
            run_seed: ctx.run_seed,
        };
        match provider.complete(&request) {
            Ok(result) => {
                ctx.calls.fetch_add(
                    result.raw_texts.len() + result.retries.iter().sum::<u32>() as usize,
                    Ordering::Relaxed,
                );
                for (i, (text, latency)) in result.raw_texts.into_iter().zip(result.latencies).enumerate() {
                    records.push(LedgerRecord {
                        text_id: note.text_id.clone(),
                        provider_name: result.provider_name.clone(),
                        sample_index: i as u32,
                        prompt_hash: hash.clone(),
                        raw_text: text,
                        latency_ms: latency.as_millis() as u64,
                        timestamp: now_stamp(),
                        error: None,
                    });
                }
            }
            Err(e) => {
                ctx.calls.fetch_add(1, Ordering::Relaxed);
                log::warn!("note {}: {e}", note.text_id);
                records.push(LedgerRecord {
                    text_id: note.text_id.clone(),
                    provider_name: provider.name().to_owned(),
                    sample_index: 0,
                    prompt_hash: hash.clone(),
                    raw_text: String::new(),
                    latency_ms: 0,
                    timestamp: now_stamp(),
                    error: Some(e.to_string()),
                });
                failure = Some(e.to_string());
                break;
            }
        }
    }
    ctx.ledger.append(&records)?;
    Ok(failure)
}

/// Runs the full pipeline: prompt, sample, ledger, aggregate, write
/// predictions. Notes already complete in the run's ledger are skipped.
pub fn cmd_run(config: &RunConfig) -> Result<RunSummary, CliError> {
    config.validate()?;
    let plan = AggregationPlan::from_config(config)?;
    let notes = load_dataset_auto(&config.dataset)?;
    let exemplars = match &config.exemplars {
        Some(p) => load_exemplars(p)?,
        None => Vec::new(),
    };
    let template = load_template(config.template.as_deref())?;
    let consistency = Provider::from_config(config.consistency()?)?;
    let partner = config.partner()?.map(Provider::from_config).transpose()?;

    let run_dir = run_directory(config)?;
    let snapshot = run_dir.join(CONFIG_SNAPSHOT);
    if !snapshot.exists() {
        let body = serde_json::json!({ "config_hash": config.hash(), "config": config });
        fs::write(&snapshot, serde_json::to_string_pretty(&body).expect("config serializes"))
            .map_err(io_err(&snapshot))?;
    }
    let ledger_path = run_dir.join(LEDGER_FILE);
    let prior = if ledger_path.exists() {
        read_ledger(&ledger_path)?
    } else {
        Vec::new()
    };
    let pending: Vec<&AnnotatedNote> = {
        let index = index_ledger(&prior);
        notes
            .iter()
            .filter(|n| {
                let done = |name: &str, k: usize| matches!(slots(&index, &n.text_id, name, k), Slots::Ready(_));
                !(done(&plan.consistency, plan.samples)
                    && plan.partner.as_deref().is_none_or(|p| done(p, 1)))
            })
            .collect()
    };
    let ledger = LedgerWriter::open(&ledger_path)?;
    let ctx = RunContext {
        template,
        exemplars,
        consistency,
        partner,
        samples: plan.samples,
        run_seed: config.run_seed,
        ledger: &ledger,
        calls: AtomicUsize::new(0),
    };
    log::info!(
        "{} of {} notes pending in {}",
        pending.len(),
        notes.len(),
        run_dir.display()
    );
    let outcomes = par::bounded(config.parallelism, || {
        par::try_map(Execution::Parallel, &pending, |note| run_note(note, &ctx))
    })?;
    let provider_calls = ctx.calls.load(Ordering::Relaxed);
    drop(ctx);
    drop(ledger);
    let failed_notes: Vec<String> = pending
        .iter()
        .zip(&outcomes)
        .filter(|(_, f)| f.is_some())
        .map(|(n, _)| n.text_id.clone())
        .collect();

    let records = read_ledger(&ledger_path)?;
    let finals = aggregate_notes(Execution::default(), &notes, &records, &plan)?;
    let predictions_path = run_dir.join(PREDICTIONS_FILE);
    write_predictions(&predictions_path, &finals)?;
    Ok(RunSummary {
        ledger_path,
        predictions_path,
        notes_total: notes.len(),
        notes_skipped: notes.len() - pending.len(),
        provider_calls,
        failed_notes,
        run_dir,
    })
}
