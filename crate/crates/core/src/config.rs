//! JSON run configuration and the runtime assembled from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, AgentsConfig, TaskInput};
use crate::backends::{Backend, BackendError, EndpointConfig, HttpBackend, SyntheticBackend, SyntheticBackendConfig};
use crate::benchmark::{BenchmarkError, SyntheticGraph};
use crate::dataset::{read_jsonl, DatasetError, TaskRecord};
use crate::math::{GaussianPolicy, MathError};
use crate::orchestrator::{AblationConfig, EvalConfig, Pipeline, PipelineConfig};
use crate::prompts::{PromptError, PromptPaths, Prompts};
use crate::retrieval::{KnowledgeBase, RawKnowledgeItem, RetrievalConfig, RetrievalError};
use crate::selfgame::SelfGameConfig;
use crate::training::{Checkpoint, PpoConfig, TrainError};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Syntax(serde_json::Error),
    #[error("config key `{key}`: {message}")]
    Key { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("no knowledge base given (set `kb` or pass --kb)")]
    MissingKnowledgeBase,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub synthetic: SyntheticBackendConfig,
    pub endpoint: EndpointConfig,
}

/// Initial policy: isotropic Gaussian, or a saved checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyInit {
    pub mean: f64,
    pub variance: f64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self {
            mean: 1.0,
            variance: 0.05,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    /// Root seed; `--seed` overrides it.
    pub seed: u64,
    /// Worker threads for concurrent deliberations; all cores when unset.
    pub parallel: Option<usize>,
    pub agents: AgentsConfig,
    pub retrieval: RetrievalConfig,
    pub selfgame: SelfGameConfig,
    pub training: PpoConfig,
    pub policy: PolicyInit,
    pub backend: BackendConfig,
    pub prompts: PromptPaths,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
    /// Knowledge-base JSONL; `--kb` overrides it.
    pub kb: Option<PathBuf>,
    /// Task JSONL used by `train`.
    pub train_dataset: Option<PathBuf>,
    /// Generate the K viewpoints of one deliberation concurrently.
    pub parallel_generation: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            parallel: None,
            agents: AgentsConfig::default(),
            retrieval: RetrievalConfig::default(),
            selfgame: SelfGameConfig::default(),
            training: PpoConfig::default(),
            policy: PolicyInit::default(),
            backend: BackendConfig::default(),
            prompts: PromptPaths::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
            kb: None,
            train_dataset: None,
            parallel_generation: true,
        }
    }
}

fn key(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Key {
        key: key.into(),
        message: message.into(),
    }
}

impl Config {
    /// Parses JSON text; absent keys take their defaults, unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(ConfigError::Syntax)?;
        match value.get("version") {
            None => return Err(key("version", "missing")),
            Some(v) if v.as_u64() != Some(u64::from(CONFIG_VERSION)) => {
                return Err(key("version", format!("unsupported value {v}, expected {CONFIG_VERSION}")))
            }
            Some(_) => {}
        }
        let config: Config = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            key(if path == "." { "<root>" } else { &path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The effective configuration as pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let a = &self.agents;
        if a.k == 0 {
            return Err(key("agents.k", "must be at least 1"));
        }
        // values above 1 are allowed and make the gate unreachable
        if !(a.tau >= 0.0 && a.tau.is_finite()) {
            return Err(key("agents.tau", format!("must be a non-negative number, got {}", a.tau)));
        }
        if !(a.w_cohe.is_finite() && a.b_cohe.is_finite()) {
            return Err(key("agents.w_cohe", "coherence parameters must be finite"));
        }
        if a.max_tokens == 0 {
            return Err(key("agents.max_tokens", "must be at least 1"));
        }
        if self.retrieval.m == 0 {
            return Err(key("retrieval.m", "must be at least 1"));
        }
        if !(self.retrieval.alpha > 0.0 && self.retrieval.alpha.is_finite()) {
            return Err(key("retrieval.alpha", format!("must be positive, got {}", self.retrieval.alpha)));
        }
        self.selfgame.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.training.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.policy.variance > 0.0 && self.policy.variance.is_finite()) {
            return Err(key("policy.variance", format!("must be positive, got {}", self.policy.variance)));
        }
        if !self.policy.mean.is_finite() {
            return Err(key("policy.mean", "must be finite"));
        }
        let s = &self.backend.synthetic;
        if s.dim == 0 {
            return Err(key("backend.synthetic.dim", "must be at least 1"));
        }
        if !(s.temperature > 0.0 && s.temperature.is_finite()) {
            return Err(key("backend.synthetic.temperature", "must be positive"));
        }
        self.backend.endpoint.validate().map_err(ConfigError::Invalid)?;
        if self.eval.runs_per_task == 0 {
            return Err(key("eval.runs_per_task", "must be at least 1"));
        }
        if self.eval.repetitions == 0 {
            return Err(key("eval.repetitions", "must be at least 1"));
        }
        if self.parallel == Some(0) {
            return Err(key("parallel", "must be at least 1"));
        }
        Ok(())
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            agents: self.agents,
            retrieval: self.retrieval,
            selfgame: self.selfgame,
            ppo: self.training,
            ablation: self.ablation,
            parallel_generation: self.parallel_generation,
        }
    }
}

/// Backend, knowledge base, prompts and pipeline settings built from a config.
pub struct Runtime {
    pub config: Config,
    pub backend: Box<dyn Backend>,
    pub base: KnowledgeBase,
    pub prompts: Prompts,
    pub pipeline_config: PipelineConfig,
}

impl Runtime {
    /// `kb` overrides `config.kb`. Every backend needs a knowledge base.
    pub fn build(config: Config, kb: Option<&Path>) -> Result<Self, ConfigError> {
        let raw: Vec<RawKnowledgeItem> = match kb.map(Path::to_path_buf).or_else(|| config.kb.clone()) {
            Some(p) => read_jsonl(&p)?,
            None => Vec::new(),
        };
        Self::from_knowledge(config, raw)
    }

    /// As [`Runtime::build`] with the knowledge items already in memory.
    pub fn from_knowledge(config: Config, raw: Vec<RawKnowledgeItem>) -> Result<Self, ConfigError> {
        config.validate()?;
        if raw.is_empty() {
            return Err(ConfigError::MissingKnowledgeBase);
        }
        let prompts = Prompts::load(&config.prompts)?;
        let backend: Box<dyn Backend> = match config.backend.kind {
            BackendKind::Synthetic => {
                let graph = SyntheticGraph::from_triples(raw.iter().map(|r| r.text.as_str()))?;
                Box::new(SyntheticBackend::new(graph, config.backend.synthetic.clone())?)
            }
            BackendKind::Http => Box::new(HttpBackend::new(config.backend.endpoint.clone(), prompts.personas.clone())?),
        };
        let base = KnowledgeBase::build(raw, backend.as_ref(), config.retrieval.alpha, config.retrieval.m)?;
        let pipeline_config = config.pipeline_config();
        Ok(Self {
            config,
            backend,
            base,
            prompts,
            pipeline_config,
        })
    }

    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            backend: self.backend.as_ref(),
            base: &self.base,
            prompts: &self.prompts,
            config: &self.pipeline_config,
        }
    }

    pub fn initial_policy(&self) -> Result<GaussianPolicy, ConfigError> {
        let dim = self.base.dim();
        let policy = match &self.config.policy.checkpoint {
            Some(p) => Checkpoint::load(p)?.into_policy()?,
            None => GaussianPolicy::isotropic(dim, self.config.policy.mean, self.config.policy.variance)?,
        };
        if policy.dim() != dim {
            return Err(key(
                "policy.checkpoint",
                format!("policy dimension {} does not match embedding dimension {dim}", policy.dim()),
            ));
        }
        Ok(policy)
    }

    pub fn tasks(&self, records: &[TaskRecord]) -> Result<Vec<TaskInput>, ConfigError> {
        records
            .iter()
            .map(|r| TaskInput::from_record(r, self.backend.as_ref()).map_err(ConfigError::from))
            .collect()
    }
}
