use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use errcorr::cli::{self, CliError, Overrides, RunConfig};
use errcorr::scoring::{Backends, SidecarClient};

#[derive(Parser)]
#[command(name = "errcorr", version, about = "Clinical note error detection and correction with LLM ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Samples per note from the consistency provider (k).
    #[arg(long)]
    samples: Option<usize>,
    /// Votes needed to accept a finding (m).
    #[arg(long)]
    majority: Option<usize>,
    /// Provider used as the ensemble partner.
    #[arg(long)]
    partner: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Directory that holds run directories.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::load(&self.config)?;
        config.apply(&Overrides {
            dataset: self.dataset.clone(),
            samples: self.samples,
            majority: self.majority,
            partner: self.partner.clone(),
            parallelism: self.parallelism,
            out: self.out.clone(),
        });
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Prompt providers for every note and write predictions.
    Run(ConfigArgs),
    /// Rebuild predictions from a recorded ledger without provider calls.
    Aggregate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ledger: PathBuf,
        /// Where to write the predictions file.
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Score a predictions file against a labelled dataset.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Neural scorer sidecar base URL, e.g. http://127.0.0.1:8765
        #[arg(long)]
        scorer_url: Option<String>,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Categorize ground-truth errors with a provider and a cluster map.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Provider name from the config; defaults to the first.
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        cluster_map: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn backends(scorer_url: Option<&str>) -> Result<Backends, CliError> {
    let Some(url) = scorer_url else {
        return Ok(Backends::rouge_only());
    };
    let client = SidecarClient::new(url)?;
    match client.health() {
        Ok(h) => {
            log::info!("scorer sidecar at {url}: {}", h.status);
            Ok(Backends::with_neural(Box::new(client)))
        }
        Err(e) => {
            log::warn!("scorer sidecar unavailable ({e}); scoring with ROUGE-1 only");
            Ok(Backends::rouge_only())
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, body + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => {
            let summary = cli::cmd_run(&args.load()?)?;
            print_json(&summary);
            if !summary.failed_notes.is_empty() {
                return Err(CliError::Provider(format!(
                    "{} note(s) recorded as no-error after provider failures",
                    summary.failed_notes.len()
                )));
            }
        }
        Command::Aggregate {
            config,
            ledger,
            predictions,
        } => {
            let finals = cli::cmd_aggregate(&ledger, &config.load()?, &predictions)?;
            println!("wrote {} predictions to {}", finals.len(), predictions.display());
        }
        Command::Score {
            predictions,
            dataset,
            scorer_url,
            report,
        } => {
            let backends = backends(scorer_url.as_deref())?;
            let file = cli::cmd_score(&predictions, &dataset, &backends, report.as_deref())?;
            print_json(&file);
        }
        Command::Analyze {
            config,
            dataset,
            provider,
            cluster_map,
            report,
        } => {
            let config = RunConfig::load(&config)?;
            let provider = match &provider {
                Some(name) => config.provider(name)?,
                None => config
                    .providers
                    .first()
                    .ok_or_else(|| CliError::Config("no providers configured".into()))?,
            };
            let dataset = dataset.unwrap_or_else(|| config.dataset.clone());
            let analysis = cli::cmd_analyze(&dataset, provider, &cluster_map)?;
            if let Some(path) = &report {
                write_json(path, &analysis)?;
            }
            print_json(&analysis.histogram);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("errcorr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
