//! TOML run configuration. Every section is optional; missing keys take
//! the defaults of the corresponding library config.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use memtree_core::construction::ConstructionConfig;
use memtree_core::embedding::{Embedder, HashedEmbedder, RemoteEmbedder, DEFAULT_DIM};
use memtree_core::eval::BenchmarkSize;
use memtree_core::hindsight::HindsightConfig;
use memtree_core::metrics::AccuracyRule;
use memtree_core::mot::EnsembleConfig;
use memtree_core::policy::{Policy, RemoteChatConfig, RemoteChatPolicy, ReplayPolicy, ScriptedPolicy};
use memtree_core::retrieval::RetrievalConfig;
use memtree_core::toy::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub embedder: EmbedderConfig,
    pub policy: PolicyConfig,
    pub construction: ConstructionConfig,
    pub retrieval: RetrievalConfig,
    pub ensemble: EnsembleConfig,
    pub trainer: TrainerConfig,
    pub hindsight: HindsightConfig,
    pub toy: ToyEnvConfig,
    pub benchmark: BenchmarkSize,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            embedder: EmbedderConfig::default(),
            policy: PolicyConfig::default(),
            construction: ConstructionConfig::default(),
            retrieval: RetrievalConfig::default(),
            ensemble: EnsembleConfig::default(),
            trainer: TrainerConfig::default(),
            hindsight: HindsightConfig::default(),
            toy: ToyEnvConfig::default(),
            benchmark: BenchmarkSize::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub endpoint: String,
    /// Environment variable holding the bearer token, if any.
    pub token_env: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: EmbedderKind::Hashed,
            dim: DEFAULT_DIM,
            endpoint: String::new(),
            token_env: "MEMTREE_EMBED_TOKEN".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyBackend {
    Scripted,
    Remote,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub backend: PolicyBackend,
    /// Scripted backend: chance of a non-greedy search choice when sampling.
    pub exploration: f64,
    /// Scripted backend: chance of a deliberately malformed call.
    pub format_noise: f64,
    /// Replay backend: recorded trace file.
    pub trace: Option<PathBuf>,
    pub remote: RemoteChatConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let scripted = ScriptedPolicy::default();
        PolicyConfig {
            backend: PolicyBackend::Scripted,
            exploration: scripted.exploration,
            format_noise: scripted.format_noise,
            trace: None,
            remote: RemoteChatConfig::default(),
        }
    }
}

/// Synthetic environment for `toytrain`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEnvConfig {
    pub env_seed: u64,
    pub max_depth: usize,
}

impl Default for ToyEnvConfig {
    fn default() -> Self {
        ToyEnvConfig { env_seed: 7, max_depth: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub accuracy_rule: AccuracyRule,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { accuracy_rule: AccuracyRule::Containment }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        bail!("{name} must lie in [0, 1], got {v}");
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedder.dim == 0 {
            bail!("embedder.dim must be positive");
        }
        if self.embedder.kind == EmbedderKind::Remote && self.embedder.endpoint.is_empty() {
            bail!("embedder.endpoint is required for the remote embedder");
        }
        unit("policy.exploration", self.policy.exploration)?;
        unit("policy.format_noise", self.policy.format_noise)?;
        if self.policy.backend == PolicyBackend::Replay && self.policy.trace.is_none() {
            bail!("policy.trace is required for the replay backend");
        }
        if self.policy.backend == PolicyBackend::Remote && self.policy.remote.endpoint.is_empty() {
            bail!("policy.remote.endpoint is required for the remote backend");
        }
        if self.construction.chunk_size == 0 {
            bail!("construction.chunk_size must be positive");
        }
        if self.retrieval.max_steps == 0 {
            bail!("retrieval.max_steps must be positive");
        }
        if self.retrieval.top_k == 0 {
            bail!("retrieval.top_k must be positive");
        }
        self.ensemble.validate()?;
        self.trainer.validate()?;
        if self.hindsight.lambda.is_nan() || self.hindsight.lambda < 0.0 {
            bail!("hindsight.lambda must be >= 0, got {}", self.hindsight.lambda);
        }
        if !(self.hindsight.keep_fraction > 0.0 && self.hindsight.keep_fraction <= 1.0) {
            bail!("hindsight.keep_fraction must lie in (0, 1], got {}", self.hindsight.keep_fraction);
        }
        if self.toy.max_depth == 0 {
            bail!("toy.max_depth must be positive");
        }
        Ok(())
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>> {
        Ok(match self.embedder.kind {
            EmbedderKind::Hashed => Arc::new(HashedEmbedder::new(self.embedder.dim)),
            EmbedderKind::Remote => {
                let token = std::env::var(&self.embedder.token_env).ok().filter(|t| !t.is_empty());
                Arc::new(RemoteEmbedder::new(self.embedder.endpoint.clone(), token)?)
            }
        })
    }

    pub fn policy(&self) -> Result<Arc<dyn Policy>> {
        Ok(match self.policy.backend {
            PolicyBackend::Scripted => Arc::new(ScriptedPolicy {
                exploration: self.policy.exploration,
                format_noise: self.policy.format_noise,
            }),
            PolicyBackend::Remote => Arc::new(RemoteChatPolicy::new(self.policy.remote.clone())?),
            PolicyBackend::Replay => {
                let path = self.policy.trace.as_deref().expect("validated");
                Arc::new(ReplayPolicy::from_jsonl(path).with_context(|| format!("loading trace {}", path.display()))?)
            }
        })
    }
}
