//! TOML configuration and backend assembly.
//!
//! ```toml
//! [store]                 # used when a store is created
//! chunk_size = 2
//! k_session = 8
//!
//! [retrieval]
//! k_trees = 5
//! combiner = { kind = "weighted", alpha = 0.7 }
//!
//! [exec]
//! budget = 8              # concurrent port calls per flush level
//!
//! [extractor]
//! kind = "rule"           # rule | fixture (path = "...") | http
//! [summarizer]
//! kind = "clause"         # clause (max_len) | http
//! [embedder]
//! kind = "hash"           # hash (dim, overrides = "file.json") | http
//! [planner]
//! kind = "none"           # none | template | scripted (rules) | http
//! [chooser]
//! kind = "none"           # none | keyword (rules) | overlap (beam) | http
//!
//! [http]
//! base_url = "http://127.0.0.1:8000/v1"
//! model = "..."
//! embedding_model = "..."
//! api_key_env = "MEMFOREST_API_KEY"
//! ```
//!
//! Relative paths are resolved against the config file's directory. The
//! embedder and summarizer settings produce fingerprints that must match the
//! ones recorded in the store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use memforest_core::backends::mock::{
    default_topic_buckets, ClauseSummarizer, FixtureExtractor, HashEmbedder, KeywordChooser, OverlapChooser,
    RuleExtractor, ScriptedPlanner, TemplatePlanner,
};
use memforest_core::backends::{
    Chooser, Clock, Embedder, Extractor, NullClock, PortCallLedger, Planner, Ports, Summarizer,
};
use memforest_core::ingest::FactCandidate;
use memforest_core::retrieval::RetrievalConfig;
use memforest_core::substrate::SessionId;
use memforest_core::StoreConfig;
use serde::{Deserialize, Serialize};

use crate::exec::{SystemClock, Threads};
use crate::http::{
    prompt_version, HttpChooser, HttpClient, HttpConfig, HttpEmbedder, HttpExtractor, HttpPlanner, HttpSummarizer,
    SUMMARIZE_PROMPT,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}: {1}")]
    Toml(PathBuf, toml::de::Error),
    #[error("{0}: {1}")]
    Json(PathBuf, serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecConfig {
    pub budget: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self { budget: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ExtractorConfig {
    Rule {},
    /// Replays candidates from a JSON file of `{session_id, chunk_index, candidates}` entries.
    Fixture { path: PathBuf },
    Http {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SummarizerConfig {
    Clause {
        #[serde(default = "default_max_len")]
        max_len: usize,
    },
    Http {},
}

fn default_max_len() -> usize {
    ClauseSummarizer::default().max_len
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        SummarizerConfig::Clause { max_len: default_max_len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hash {
        #[serde(default = "default_dim")]
        dim: usize,
        /// JSON file mapping exact texts to vectors: `[{"text": ..., "vector": [...]}]`.
        #[serde(default)]
        overrides: Option<PathBuf>,
    },
    Http {},
}

fn default_dim() -> usize {
    HashEmbedder::default().dim
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hash { dim: default_dim(), overrides: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PlannerConfig {
    None {},
    Template {},
    /// `rules = [["trigger", "subquery"], ...]`
    Scripted { rules: Vec<(String, String)> },
    Http {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ChooserConfig {
    None {},
    /// `rules = [["trigger", "target"], ...]`
    Keyword { rules: Vec<(String, String)> },
    Overlap {
        #[serde(default = "default_beam")]
        beam: usize,
    },
    Http {},
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Rule {}
    }
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig::None {}
    }
}

impl Default for ChooserConfig {
    fn default() -> Self {
        ChooserConfig::None {}
    }
}

fn default_beam() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub store: StoreConfig,
    pub retrieval: RetrievalConfig,
    pub exec: ExecConfig,
    pub extractor: ExtractorConfig,
    pub summarizer: SummarizerConfig,
    pub embedder: EmbedderConfig,
    pub planner: PlannerConfig,
    pub chooser: ChooserConfig,
    pub http: HttpConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingOverride {
    pub text: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub session_id: SessionId,
    pub chunk_index: u32,
    pub candidates: Vec<FactCandidate>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.into(), e))?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Json(path.into(), e))
}

// FNV-1a, stable across platforms and releases.
fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Config {
    pub fn parse(text: &str, base_dir: &Path) -> std::result::Result<Self, toml::de::Error> {
        let mut cfg: Config = toml::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.into(), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::parse(&text, &base).map_err(|e| ConfigError::Toml(path.into(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.store.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let EmbedderConfig::Hash { dim, .. } = self.embedder {
            if dim == 0 {
                return Err(ConfigError::Invalid("embedder dim must be positive".into()));
            }
        }
        if self.exec.budget == 0 {
            return Err(ConfigError::Invalid("exec budget must be at least 1".into()));
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn overrides(&self) -> Result<Vec<EmbeddingOverride>> {
        match &self.embedder {
            EmbedderConfig::Hash { overrides: Some(p), .. } => read_json(&self.resolve(p)),
            _ => Ok(Vec::new()),
        }
    }

    /// Fingerprint recorded as the store's `embedder_id`.
    pub fn embedder_id(&self) -> Result<String> {
        Ok(match &self.embedder {
            EmbedderConfig::Hash { dim, .. } => {
                let ov = self.overrides()?;
                if ov.is_empty() {
                    format!("mock-hash-{dim}")
                } else {
                    let bytes = serde_json::to_vec(&ov).expect("serializable");
                    format!("mock-hash-{dim}+{:016x}", fnv64(&bytes))
                }
            }
            EmbedderConfig::Http {} => format!("http:{}", self.http.embedding_model),
        })
    }

    /// Fingerprint recorded as the store's `summarizer_id`.
    pub fn summarizer_id(&self) -> String {
        match &self.summarizer {
            SummarizerConfig::Clause { max_len } if *max_len == default_max_len() => "mock-clause".into(),
            SummarizerConfig::Clause { max_len } => format!("mock-clause-{max_len}"),
            SummarizerConfig::Http {} => format!("http:{}:{}", self.http.model, prompt_version(SUMMARIZE_PROMPT)),
        }
    }

    /// Store settings for a new store, stamped with this config's fingerprints.
    pub fn store_config(&self) -> Result<StoreConfig> {
        let mut s = self.store.clone();
        s.embedder_id = self.embedder_id()?;
        s.summarizer_id = self.summarizer_id();
        Ok(s)
    }

    pub fn uses_http(&self) -> bool {
        matches!(self.extractor, ExtractorConfig::Http {})
            || matches!(self.summarizer, SummarizerConfig::Http {})
            || matches!(self.embedder, EmbedderConfig::Http {})
            || matches!(self.planner, PlannerConfig::Http {})
            || matches!(self.chooser, ChooserConfig::Http {})
    }
}

/// Live port implementations built from a [`Config`].
pub struct Backends {
    pub extractor: Box<dyn Extractor>,
    pub summarizer: Box<dyn Summarizer>,
    pub embedder: Box<dyn Embedder>,
    pub planner: Option<Box<dyn Planner>>,
    pub chooser: Option<Box<dyn Chooser>>,
    pub ledger: Arc<PortCallLedger>,
    pub exec: Threads,
    pub clock: Box<dyn Clock>,
    /// Present whenever `[http]` is usable, for answer generation.
    pub http: Option<HttpClient>,
    pub embedder_id: String,
    pub summarizer_id: String,
}

impl Backends {
    /// Builds every port. `timing` attaches a wall clock to flush stats.
    pub fn build(cfg: &Config, timing: bool) -> Result<Self> {
        let ledger = Arc::new(PortCallLedger::new());
        let client = HttpClient::new(cfg.http.clone(), ledger.clone());

        let extractor: Box<dyn Extractor> = match &cfg.extractor {
            ExtractorConfig::Rule {} => Box::new(RuleExtractor { topic_buckets: default_topic_buckets() }),
            ExtractorConfig::Fixture { path } => {
                let entries: Vec<FixtureEntry> = read_json(&cfg.resolve(path))?;
                let mut fx = FixtureExtractor::default();
                for e in entries {
                    fx.entries.insert((e.session_id, e.chunk_index), e.candidates);
                }
                Box::new(fx)
            }
            ExtractorConfig::Http {} => Box::new(HttpExtractor(client.clone())),
        };
        let summarizer: Box<dyn Summarizer> = match &cfg.summarizer {
            SummarizerConfig::Clause { max_len } => Box::new(ClauseSummarizer { max_len: *max_len }),
            SummarizerConfig::Http {} => Box::new(HttpSummarizer(client.clone())),
        };
        let embedder: Box<dyn Embedder> = match &cfg.embedder {
            EmbedderConfig::Hash { dim, .. } => {
                let mut e = HashEmbedder { dim: *dim, overrides: BTreeMap::new() };
                for o in cfg.overrides()? {
                    if o.vector.len() != *dim {
                        return Err(ConfigError::Invalid(format!(
                            "override for {:?} has dimension {}, embedder has {dim}",
                            o.text,
                            o.vector.len()
                        )));
                    }
                    e = e.with_override(o.text, o.vector);
                }
                Box::new(e)
            }
            EmbedderConfig::Http {} => Box::new(HttpEmbedder(client.clone())),
        };
        let planner: Option<Box<dyn Planner>> = match &cfg.planner {
            PlannerConfig::None {} => None,
            PlannerConfig::Template {} => Some(Box::new(TemplatePlanner)),
            PlannerConfig::Scripted { rules } => Some(Box::new(ScriptedPlanner { rules: rules.clone() })),
            PlannerConfig::Http {} => Some(Box::new(HttpPlanner(client.clone()))),
        };
        let chooser: Option<Box<dyn Chooser>> = match &cfg.chooser {
            ChooserConfig::None {} => None,
            ChooserConfig::Keyword { rules } => Some(Box::new(KeywordChooser { rules: rules.clone() })),
            ChooserConfig::Overlap { beam } => Some(Box::new(OverlapChooser { beam: *beam })),
            ChooserConfig::Http {} => Some(Box::new(HttpChooser(client.clone()))),
        };
        let clock: Box<dyn Clock> = if timing { Box::new(SystemClock::default()) } else { Box::new(NullClock) };
        Ok(Self {
            extractor,
            summarizer,
            embedder,
            planner,
            chooser,
            ledger,
            exec: Threads::new(cfg.exec.budget),
            clock,
            http: cfg.uses_http().then_some(client),
            embedder_id: cfg.embedder_id()?,
            summarizer_id: cfg.summarizer_id(),
        })
    }

    pub fn ports(&self) -> Ports<'_> {
        Ports {
            extractor: self.extractor.as_ref(),
            summarizer: self.summarizer.as_ref(),
            embedder: self.embedder.as_ref(),
            planner: self.planner.as_deref(),
            chooser: self.chooser.as_deref(),
            ledger: &self.ledger,
            exec: &self.exec,
            clock: self.clock.as_ref(),
        }
    }

    /// Errors when the store was materialized with different backends.
    pub fn check_fingerprint(&self, store: &StoreConfig) -> std::result::Result<(), String> {
        let mut diffs = Vec::new();
        if store.embedder_id != self.embedder_id {
            diffs.push(format!("embedder {} (store) vs {} (config)", store.embedder_id, self.embedder_id));
        }
        if store.summarizer_id != self.summarizer_id {
            diffs.push(format!("summarizer {} (store) vs {} (config)", store.summarizer_id, self.summarizer_id));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(format!("backend fingerprint mismatch: {}; run rematerialize", diffs.join(", ")))
        }
    }
}
