//! Run configuration: one TOML or JSON file (picked by extension) holding
//! providers, engine/filter/metric settings, and paths. A resolved snapshot
//! is written into every run directory so scripted reruns are reproducible.

use crate::corpus::FilterThresholds;
use crate::eval::{BenchmarkConfig, BenchmarkMode, StarterAssignment};
use crate::gateway::{
    load_script_dir, ChatEndpoint, ChatSettings, EmbedGateway, Gateway, HttpChatBackend,
    HttpEmbedBackend, RetryPolicy, ScriptedChat, WireLog,
};
use crate::prompts::PromptSet;
use crate::strategy::EngineConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("cannot parse config {0}: {1}")]
    Parse(PathBuf, String),
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("provider {0} is not configured and no script was supplied")]
    MissingProvider(&'static str),
    #[error("api key env var {0} is not set")]
    MissingApiKey(String),
}

fn default_max_in_flight() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_temperature() -> f64 {
    1.0
}

fn default_top_p() -> f64 {
    0.95
}

fn default_max_tokens() -> u32 {
    8192
}

/// One chat provider: endpoint, model, limits, and sampling defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_id: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProvidersConfig {
    pub expert: Option<ProviderConfig>,
    pub judge: Option<ProviderConfig>,
    pub reference: Option<ProviderConfig>,
    pub embedding: Option<ProviderConfig>,
}

fn default_alpha() -> u32 {
    10
}

fn default_history_window() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SifConfig {
    #[serde(default = "default_alpha")]
    pub alpha: u32,
    #[serde(default = "default_history_window")]
    pub history_window: usize,
}

impl Default for SifConfig {
    fn default() -> Self {
        Self { alpha: default_alpha(), history_window: default_history_window() }
    }
}

fn default_repeats() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default)]
    pub mode: Option<BenchmarkMode>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub starter_seed: Option<u64>,
    #[serde(default)]
    pub starter_indices: Option<Vec<usize>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { mode: None, repeats: default_repeats(), starter_seed: None, starter_indices: None }
    }
}

impl EvalSection {
    pub fn benchmark_config(&self) -> BenchmarkConfig {
        let starter = match (&self.starter_indices, self.starter_seed) {
            (Some(indices), _) => StarterAssignment::Indices(indices.clone()),
            (None, Some(seed)) => StarterAssignment::Seed(seed),
            (None, None) => StarterAssignment::default(),
        };
        BenchmarkConfig {
            mode: self.mode.unwrap_or(BenchmarkMode::SelfPlay),
            starter,
            repeats: self.repeats,
        }
    }
}

fn default_workers() -> usize {
    4
}

fn default_parse_retries() -> u32 {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_parse_retries")]
    pub parse_retries: u32,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { workers: default_workers(), parse_retries: default_parse_retries() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsConfig {
    pub tasks_file: PathBuf,
    pub output_root: PathBuf,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub paths: PathsConfig,
    #[serde(default)]
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub filter: FilterThresholds,
    #[serde(default)]
    pub sif: SifConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub run: RunSection,
}

impl RunConfig {
    /// Loads a config file, deciding the format by extension.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.into(), e))?;
        let is_json = path.extension().map(|e| e == "json").unwrap_or(false);
        let mut config: RunConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| ConfigError::Parse(path.into(), e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::Parse(path.into(), e.to_string()))?
        };
        // relative paths resolve against the config file's directory
        if let Some(dir) = path.parent() {
            if config.paths.tasks_file.is_relative() {
                config.paths.tasks_file = dir.join(&config.paths.tasks_file);
            }
            if config.paths.output_root.is_relative() {
                config.paths.output_root = dir.join(&config.paths.output_root);
            }
            if let Some(templates) = &config.paths.templates_dir {
                if templates.is_relative() {
                    config.paths.templates_dir = Some(dir.join(templates));
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(ConfigError::Invalid(format!(
                "run_id {:?} is not filesystem-safe",
                self.run_id
            )));
        }
        if !self.paths.tasks_file.exists() {
            return Err(ConfigError::Invalid(format!(
                "tasks file {} does not exist",
                self.paths.tasks_file.display()
            )));
        }
        self.engine
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.filter.nsi_keep > self.filter.plain_keep {
            return Err(ConfigError::Invalid("filter requires nsi_keep <= plain_keep".into()));
        }
        Ok(())
    }

    pub fn prompts(&self) -> Result<PromptSet, ConfigError> {
        match &self.paths.templates_dir {
            Some(dir) => PromptSet::with_overrides(dir)
                .map_err(|e| ConfigError::Invalid(format!("templates dir: {e}"))),
            None => Ok(PromptSet::default()),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.output_root.join("runs").join(&self.run_id)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.paths.output_root.join("corpus").join(&self.run_id)
    }

    pub fn sif_dir(&self) -> PathBuf {
        self.paths.output_root.join("sif").join(&self.run_id)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.paths.output_root.join("eval").join(&self.run_id)
    }

    /// Writes the resolved snapshot consumed by reproducibility audits.
    pub fn write_resolved(&self) -> std::io::Result<PathBuf> {
        let dir = self.run_dir();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("config.resolved.json");
        std::fs::write(&path, serde_json::to_string_pretty(self).expect("serializable config"))?;
        Ok(path)
    }
}

/// The live provider handles for one run.
pub struct ProviderSet {
    pub expert: ChatEndpoint,
    pub judge: ChatEndpoint,
    pub reference: Option<ChatEndpoint>,
    pub embed: Option<EmbedGateway>,
}

fn http_endpoint(
    name: &'static str,
    provider: &ProviderConfig,
    judge_mode: bool,
    log: Option<Arc<WireLog>>,
) -> Result<ChatEndpoint, ConfigError> {
    let api_key = match &provider.api_key_env {
        Some(var) => {
            Some(std::env::var(var).map_err(|_| ConfigError::MissingApiKey(var.clone()))?)
        }
        None => None,
    };
    let backend = Arc::new(HttpChatBackend::new(
        provider.endpoint_url.clone(),
        api_key,
        Duration::from_secs(provider.timeout_secs),
    ));
    let gateway = Arc::new(Gateway::new(
        name,
        backend,
        provider.max_in_flight,
        provider.retry.clone(),
        log,
    ));
    let settings = ChatSettings {
        model_id: provider.model_id.clone(),
        temperature: if judge_mode { 0.0 } else { provider.temperature },
        top_p: provider.top_p,
        max_tokens: provider.max_tokens,
    };
    Ok(ChatEndpoint::new(gateway, settings))
}

fn scripted_endpoint(
    name: &'static str,
    script: ScriptedChat,
    judge_mode: bool,
    log: Option<Arc<WireLog>>,
) -> ChatEndpoint {
    let gateway = Arc::new(Gateway::new(
        name,
        Arc::new(script),
        1,
        RetryPolicy { max_retries: 0, backoff_ms: vec![0] },
        log,
    ));
    let settings = ChatSettings {
        model_id: format!("mock-{name}"),
        temperature: if judge_mode { 0.0 } else { default_temperature() },
        top_p: default_top_p(),
        max_tokens: default_max_tokens(),
    };
    ChatEndpoint::new(gateway, settings)
}

impl ProviderSet {
    /// Builds providers from config, or entirely from a script directory in
    /// mock mode (no network, no keys).
    pub fn build(
        config: &RunConfig,
        mock_dir: Option<&Path>,
        log: Option<Arc<WireLog>>,
    ) -> Result<Self, ConfigError> {
        if let Some(dir) = mock_dir {
            let scripts = load_script_dir(dir)
                .map_err(|e| ConfigError::Invalid(format!("script dir {}: {e}", dir.display())))?;
            let expert = scripts
                .expert
                .ok_or(ConfigError::MissingProvider("expert (expert.jsonl)"))?;
            let judge = scripts
                .judge
                .ok_or(ConfigError::MissingProvider("judge (judge.jsonl)"))?;
            return Ok(Self {
                expert: scripted_endpoint("expert", expert, false, log.clone()),
                judge: scripted_endpoint("judge", judge, true, log.clone()),
                reference: scripts
                    .reference
                    .map(|s| scripted_endpoint("reference", s, false, log.clone())),
                embed: scripts.embedder.map(|e| {
                    EmbedGateway::new(
                        "mock-embedding",
                        Arc::new(e),
                        1,
                        RetryPolicy { max_retries: 0, backoff_ms: vec![0] },
                    )
                }),
            });
        }

        let expert_cfg =
            config.providers.expert.as_ref().ok_or(ConfigError::MissingProvider("expert"))?;
        let judge_cfg =
            config.providers.judge.as_ref().ok_or(ConfigError::MissingProvider("judge"))?;
        let expert = http_endpoint("expert", expert_cfg, false, log.clone())?;
        let judge = http_endpoint("judge", judge_cfg, true, log.clone())?;
        let reference = match &config.providers.reference {
            Some(provider) => Some(http_endpoint("reference", provider, false, log.clone())?),
            None => None,
        };
        let embed = match &config.providers.embedding {
            Some(provider) => {
                let api_key = match &provider.api_key_env {
                    Some(var) => Some(
                        std::env::var(var).map_err(|_| ConfigError::MissingApiKey(var.clone()))?,
                    ),
                    None => None,
                };
                Some(EmbedGateway::new(
                    provider.model_id.clone(),
                    Arc::new(HttpEmbedBackend::new(
                        provider.endpoint_url.clone(),
                        api_key,
                        Duration::from_secs(provider.timeout_secs),
                    )),
                    provider.max_in_flight,
                    provider.retry.clone(),
                ))
            }
            None => None,
        };
        Ok(Self { expert, judge, reference, embed })
    }
}
