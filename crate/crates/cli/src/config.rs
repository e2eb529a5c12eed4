//! Run configuration: one TOML document, paths relative to its directory,
//! endpoint tokens from the environment, command-line flags on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use expmem_core::agent::{CandidateSource, Grading, RemoteAgentConfig};
use expmem_core::construction::SnapshotMode;
use expmem_core::http::EndpointConfig;
use expmem_core::RetrievalConfig;
use serde::{Deserialize, Serialize};

pub const AGENT_TOKEN_ENV: &str = "EXPMEM_AGENT_TOKEN";
pub const EMBED_TOKEN_ENV: &str = "EXPMEM_EMBED_TOKEN";

pub const DEFAULT_MOCK_DIMENSION: usize = 64;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub testset: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    /// Directory receiving logs and reports.
    pub logs: Option<PathBuf>,
    /// Directory of prompt template overrides.
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AgentSettings {
    Mock { script: PathBuf },
    Remote(RemoteAgentConfig),
}

fn default_dimension() -> usize {
    DEFAULT_MOCK_DIMENSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedderSettings {
    Mock {
        #[serde(default = "default_dimension")]
        dimension: usize,
        #[serde(default)]
        seed: u64,
    },
    Remote {
        dimension: usize,
        #[serde(flatten)]
        endpoint: EndpointConfig,
    },
}

impl Default for EmbedderSettings {
    fn default() -> Self {
        EmbedderSettings::Mock {
            dimension: DEFAULT_MOCK_DIMENSION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub agent: Option<AgentSettings>,
    pub embedder: EmbedderSettings,
    pub retrieval: RetrievalConfig,
    pub rounds: u8,
    pub trials: u32,
    pub candidates: CandidateSource,
    pub grading: Grading,
    pub snapshot: SnapshotMode,
    /// Worker threads; results do not depend on it.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            agent: None,
            embedder: EmbedderSettings::default(),
            retrieval: RetrievalConfig::default(),
            rounds: 2,
            trials: 1,
            candidates: CandidateSource::Agent,
            grading: Grading::Exact,
            snapshot: SnapshotMode::Streaming,
            workers: 4,
        }
    }
}

/// Command-line overrides shared by the run subcommands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub tau: Option<f64>,
    pub top_k: Option<usize>,
    pub rounds: Option<u8>,
    pub trials: Option<u32>,
    pub candidates: Option<CandidateSource>,
    pub mock_agent: Option<PathBuf>,
    pub mock_embedder: bool,
    pub workers: Option<usize>,
}

/// A loaded configuration with paths resolved against the config directory.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    /// Values as written (plus overrides); echoed into artifacts.
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn path(&self, name: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        value
            .as_deref()
            .map(|p| self.resolve(p))
            .with_context(|| format!("config is missing paths.{name}"))
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.config
            .paths
            .logs
            .as_deref()
            .map(|p| self.resolve(p))
            .unwrap_or_else(|| self.base_dir.join("logs"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).context("invalid configuration")?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(tau) = o.tau {
            self.retrieval.tau = tau;
        }
        if let Some(k) = o.top_k {
            self.retrieval.top_k = k;
        }
        if let Some(r) = o.rounds {
            self.rounds = r;
        }
        if let Some(t) = o.trials {
            self.trials = t;
        }
        if let Some(c) = o.candidates {
            self.candidates = c;
        }
        if let Some(script) = &o.mock_agent {
            self.agent = Some(AgentSettings::Mock {
                script: script.clone(),
            });
        }
        if o.mock_embedder && !matches!(self.embedder, EmbedderSettings::Mock { .. }) {
            self.embedder = EmbedderSettings::default();
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
    }

    /// Range checks on the numeric fields.
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.rounds) {
            bail!("rounds must be 1 or 2, got {}", self.rounds);
        }
        if self.trials == 0 {
            bail!("trials must be at least 1");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        self.retrieval.validate()?;
        match &self.embedder {
            EmbedderSettings::Mock { dimension, .. } if *dimension < 2 => {
                bail!("mock embedder dimension must be at least 2")
            }
            EmbedderSettings::Remote { dimension: 0, .. } => {
                bail!("remote embedder dimension must be positive")
            }
            _ => {}
        }
        Ok(())
    }

    /// Fills endpoint tokens from the environment.
    pub fn apply_env(&mut self) {
        if let Some(AgentSettings::Remote(remote)) = &mut self.agent {
            if let Ok(token) = std::env::var(AGENT_TOKEN_ENV) {
                remote.endpoint.auth_token = Some(token);
            }
        }
        if let EmbedderSettings::Remote { endpoint, .. } = &mut self.embedder {
            if let Ok(token) = std::env::var(EMBED_TOKEN_ENV) {
                endpoint.auth_token = Some(token);
            }
        }
    }

    /// Configuration echoed into artifacts. The worker count is left out
    /// because it never changes results.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("workers");
        }
        v
    }
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("config not found: {}", path.display()))?;
    let mut config = RunConfig::parse(&text)?;
    config.apply(overrides);
    config.apply_env();
    config.validate()?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(LoadedConfig { config, base_dir })
}
