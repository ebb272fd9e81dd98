//! Declarative run configuration: the meta-model, judge, models under
//! test, counts, and gateway policy. A full snapshot is frozen into each
//! run's manifest so later stages replay the same settings.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use specprobe_core::gateway::{ModelSpec, Provider, RequestPolicy};

use crate::CliError;

fn default_per_rule() -> u32 {
    2
}
fn default_repeats() -> u32 {
    1
}
fn default_true() -> bool {
    true
}
fn default_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_max_inflight() -> usize {
    4
}
fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Model used for extraction, generation, and (by default) judging.
    pub meta_model: ModelSpec,
    /// Judge override; the meta-model judges when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_model: Option<ModelSpec>,
    /// Models under test.
    pub muts: Vec<ModelSpec>,
    /// Tests per rule for the rule-based generator.
    #[serde(default = "default_per_rule")]
    pub per_rule: u32,
    /// Baseline test count; defaults to the expected rule-test count so the
    /// two generators get equal budgets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_num: Option<u32>,
    /// When set, rule extraction asks for at least this many crucial rules
    /// instead of all rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_rules: Option<u32>,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default = "default_true")]
    pub use_cache: bool,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Judge extracted rules for groundedness during extract.
    #[serde(default = "default_true")]
    pub groundedness: bool,
    /// Run baseline tests against the synthesized spec prompt and score
    /// agreement.
    #[serde(default = "default_true")]
    pub spec_agreement: bool,
    /// Response cache location; defaults to `<run-dir>/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: Config = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    /// Make mock script and cache paths absolute relative to `base`.
    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        for model in std::iter::once(&mut self.meta_model)
            .chain(self.judge_model.iter_mut())
            .chain(self.muts.iter_mut())
        {
            if let Some(script) = model.script.as_mut() {
                resolve(script);
            }
        }
        if let Some(dir) = self.cache_dir.as_mut() {
            resolve(dir);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.muts.is_empty() {
            return Err(CliError::Config(
                "config declares no models under test".into(),
            ));
        }
        if self.per_rule == 0 {
            return Err(CliError::Config("per_rule must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for model in self.all_models() {
            model
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
            if !ids.insert(model.id.clone()) {
                return Err(CliError::Config(format!(
                    "duplicate model id {:?}",
                    model.id
                )));
            }
        }
        Ok(())
    }

    pub fn all_models(&self) -> impl Iterator<Item = &ModelSpec> {
        std::iter::once(&self.meta_model)
            .chain(self.judge_model.iter())
            .chain(self.muts.iter())
    }

    pub fn judge(&self) -> &ModelSpec {
        self.judge_model.as_ref().unwrap_or(&self.meta_model)
    }

    /// Find any configured model by id (meta, judge, or MUT).
    pub fn model_by_id(&self, id: &str) -> Option<&ModelSpec> {
        self.all_models().find(|m| m.id == id)
    }

    pub fn policy(&self) -> RequestPolicy {
        RequestPolicy {
            retries: self.retries,
            timeout: Duration::from_secs(self.timeout_secs),
            use_cache: self.use_cache,
            cache_salt: None,
            backoff_base: Duration::from_millis(self.backoff_ms),
        }
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_snapshot(value: &serde_json::Value) -> Result<Config, CliError> {
        let config: Config = serde_json::from_value(value.clone())
            .map_err(|e| CliError::Config(format!("manifest config snapshot: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// A ready-to-edit config with one OpenAI-compatible endpoint.
    pub fn example() -> Config {
        let mut meta = ModelSpec::openai_compatible("gpt-4o", "https://api.openai.com", "gpt-4o");
        meta.api_key_env = Some("OPENAI_API_KEY".into());
        let mut mut_a =
            ModelSpec::openai_compatible("gpt-4o-mini", "https://api.openai.com", "gpt-4o-mini");
        mut_a.api_key_env = Some("OPENAI_API_KEY".into());
        let mut mut_b =
            ModelSpec::openai_compatible("qwen2.5:3b", "http://localhost:11434", "qwen2.5:3b");
        mut_b.provider = Provider::LocalCompatible;
        Config {
            meta_model: meta,
            judge_model: None,
            muts: vec![mut_a, mut_b],
            per_rule: default_per_rule(),
            baseline_num: None,
            num_rules: None,
            repeats: default_repeats(),
            use_cache: true,
            retries: default_retries(),
            timeout_secs: default_timeout_secs(),
            backoff_ms: default_backoff_ms(),
            max_inflight: default_max_inflight(),
            workers: default_workers(),
            groundedness: true,
            spec_agreement: true,
            cache_dir: None,
        }
    }
}
