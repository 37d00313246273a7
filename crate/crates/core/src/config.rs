//! Pipeline configuration: one TOML file, every field optional.
//!
//! ```toml
//! mode = "key_extract"
//! [paths]
//! corpus = "corpus.jsonl"
//! [retrieval]
//! n = 20
//! [rerank]
//! strategy = "gap-weighted"
//! k = 5
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::{EncoderProvider, FixtureEncoder, HashingEncoder, HttpEncoder, DEFAULT_MAX_SEQ_LEN};
use crate::exec::ExecMode;
use crate::llm::GatewayConfig;
use crate::objective::{AlphaMode, DEFAULT_TAU};
use crate::reasoning::DEFAULT_KEY_EXTRACT_ITERATIONS;
use crate::rerank::{RerankConfig, RerankError};
use crate::unroll::DEFAULT_MAX_ATTEMPTS;

pub const DEFAULT_N: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Rerank(#[from] RerankError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    #[default]
    SingleStep,
    KeyExtract,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub n: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { n: DEFAULT_N }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub tau: f64,
    pub alpha_mode: AlphaMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            tau: DEFAULT_TAU,
            alpha_mode: AlphaMode::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Hashing,
    Fixture,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub max_seq_len: usize,
    /// Hashing encoder shape.
    pub layers: usize,
    pub dim: usize,
    pub fixtures_dir: Option<PathBuf>,
    pub url: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub skip_embedding_layer: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Hashing,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            layers: 12,
            dim: 64,
            fixtures_dir: None,
            url: "http://localhost:8080/encode".into(),
            timeout_ms: 60_000,
            max_in_flight: 8,
            skip_embedding_layer: true,
        }
    }
}

impl EncoderConfig {
    pub fn build(&self) -> Result<Box<dyn EncoderProvider>, ConfigError> {
        Ok(match self.kind {
            EncoderKind::Hashing => Box::new(HashingEncoder::new(self.layers, self.dim)),
            EncoderKind::Fixture => {
                let dir = self.fixtures_dir.clone().ok_or_else(|| {
                    ConfigError::Invalid("encoder.kind = fixture needs encoder.fixtures_dir".into())
                })?;
                Box::new(FixtureEncoder::from_dir(dir))
            }
            EncoderKind::Http => Box::new(
                HttpEncoder::new(
                    self.url.clone(),
                    Duration::from_millis(self.timeout_ms),
                    self.max_in_flight,
                )
                .skip_embedding_layer(self.skip_embedding_layer),
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub retrieval: RetrievalConfig,
    pub rerank: RerankConfig,
    pub objective: ObjectiveConfig,
    pub gateway: GatewayConfig,
    pub encoder: EncoderConfig,
    pub mode: AnswerMode,
    pub unified_reasoning: bool,
    pub key_extract_iterations: usize,
    pub max_attempts: usize,
    pub exec: ExecMode,
    /// Questions evaluated concurrently; unset means one per CPU.
    pub eval_threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            retrieval: RetrievalConfig::default(),
            rerank: RerankConfig::default(),
            objective: ObjectiveConfig::default(),
            gateway: GatewayConfig::default(),
            encoder: EncoderConfig::default(),
            mode: AnswerMode::default(),
            unified_reasoning: false,
            key_extract_iterations: DEFAULT_KEY_EXTRACT_ITERATIONS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            exec: ExecMode::default(),
            eval_threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, base: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            source: Box::new(e),
        })?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, path)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let p = &mut self.paths;
        for slot in [
            &mut p.corpus,
            &mut p.qa,
            &mut p.store,
            &mut p.index,
            &mut p.prompts,
            &mut p.output,
        ] {
            fix(slot);
        }
        fix(&mut self.gateway.fixtures_dir);
        fix(&mut self.encoder.fixtures_dir);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.rerank.validate()?;
        if self.retrieval.n == 0 {
            return Err(ConfigError::Invalid("retrieval.n must be at least 1".into()));
        }
        if self.rerank.k > self.retrieval.n {
            return Err(ConfigError::Invalid(format!(
                "rerank.k = {} exceeds retrieval.n = {}",
                self.rerank.k, self.retrieval.n
            )));
        }
        if !(self.objective.tau > 0.0 && self.objective.tau.is_finite()) {
            return Err(ConfigError::Invalid("objective.tau must be positive".into()));
        }
        if self.key_extract_iterations == 0 {
            return Err(ConfigError::Invalid("key_extract_iterations must be at least 1".into()));
        }
        if self.encoder.max_seq_len == 0 {
            return Err(ConfigError::Invalid("encoder.max_seq_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn require(&self, what: &str, path: &Option<PathBuf>) -> Result<PathBuf, ConfigError> {
        path.clone()
            .ok_or_else(|| ConfigError::Invalid(format!("paths.{what} is not set")))
    }
}
