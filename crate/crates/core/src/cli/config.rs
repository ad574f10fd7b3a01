use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::prompting::prompt_hash;
use crate::providers::ProviderConfig;

fn default_samples() -> usize {
    1
}
fn default_majority() -> usize {
    1
}
fn default_parallelism() -> usize {
    4
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Experiment configuration. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub exemplars: Option<PathBuf>,
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub providers: Vec<ProviderConfig>,
    /// Provider sampled `samples_per_note` times; defaults to the first.
    #[serde(default)]
    pub consistency_provider: Option<String>,
    #[serde(default = "default_samples")]
    pub samples_per_note: usize,
    #[serde(default = "default_majority")]
    pub majority_threshold: usize,
    #[serde(default)]
    pub ensemble_partner: Option<String>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub run_seed: u64,
    /// Base URL of the neural scorer sidecar.
    #[serde(default)]
    pub scorer_url: Option<String>,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub samples: Option<usize>,
    pub majority: Option<usize>,
    pub partner: Option<String>,
    pub parallelism: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.dataset);
        join(&mut self.output_dir);
        if let Some(p) = self.exemplars.as_mut() {
            join(p);
        }
        if let Some(p) = self.template.as_mut() {
            join(p);
        }
        for provider in &mut self.providers {
            if let Some(p) = provider.mock_script.as_mut() {
                join(p);
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.dataset {
            self.dataset = v.clone();
        }
        if let Some(v) = o.samples {
            self.samples_per_note = v;
        }
        if let Some(v) = o.majority {
            self.majority_threshold = v;
        }
        if let Some(v) = &o.partner {
            self.ensemble_partner = Some(v.clone());
        }
        if let Some(v) = o.parallelism {
            self.parallelism = v;
        }
        if let Some(v) = &o.out {
            self.output_dir = v.clone();
        }
    }

    pub fn provider(&self, name: &str) -> Result<&ProviderConfig, CliError> {
        self.providers
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| CliError::Config(format!("no provider named `{name}`")))
    }

    pub fn consistency(&self) -> Result<&ProviderConfig, CliError> {
        match &self.consistency_provider {
            Some(name) => self.provider(name),
            None => self
                .providers
                .iter()
                .find(|p| Some(&p.name) != self.ensemble_partner.as_ref())
                .ok_or_else(|| CliError::Config("no providers configured".into())),
        }
    }

    pub fn partner(&self) -> Result<Option<&ProviderConfig>, CliError> {
        self.ensemble_partner
            .as_deref()
            .map(|name| self.provider(name))
            .transpose()
    }

    /// Threshold and provider checks that do not touch the filesystem.
    pub fn validate_plan(&self) -> Result<(), CliError> {
        let (k, m) = (self.samples_per_note, self.majority_threshold);
        if k == 0 {
            return Err(CliError::Config("samples_per_note must be at least 1".into()));
        }
        if m == 0 || m > k {
            return Err(CliError::Config(format!(
                "majority_threshold {m} must be in 1..={k}"
            )));
        }
        if self.parallelism == 0 {
            return Err(CliError::Config("parallelism must be positive".into()));
        }
        let consistency = self.consistency()?;
        consistency.validate(k)?;
        if let Some(partner) = self.partner()? {
            if partner.name == consistency.name {
                return Err(CliError::Config(
                    "ensemble partner must differ from the consistency provider".into(),
                ));
            }
            partner.validate(1)?;
        }
        Ok(())
    }

    /// Full validation before a run: plan plus referenced paths.
    pub fn validate(&self) -> Result<(), CliError> {
        self.validate_plan()?;
        let mut paths = vec![&self.dataset];
        paths.extend(self.exemplars.as_ref());
        paths.extend(self.template.as_ref());
        for p in &self.providers {
            paths.extend(p.mock_script.as_ref());
        }
        for p in paths {
            if !p.exists() {
                return Err(CliError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Content hash of the settings that affect outputs. Worker count and
    /// output location are left out so a resumed run finds its directory.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.parallelism = 0;
        keyed.output_dir = PathBuf::new();
        keyed.scorer_url = None;
        prompt_hash(&serde_json::to_string(&keyed).expect("config serializes"))
    }
}
