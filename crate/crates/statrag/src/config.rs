//! Service configuration: one JSON document plus `STATRAG_` environment
//! overrides of its scalar fields.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use statrag_core::corpus::{chunk_documents, load_corpus, Chunk, ChunkConfig, IngestWarning};
use statrag_core::embed::{Embedder, EmbedderKind, EmbedderSpec, EmbeddingCache, RemoteEmbedder};
use statrag_core::eval::config_fingerprint;
use statrag_core::index::VectorIndex;
use statrag_core::pipeline::{GeneratorSpec, Pipeline, PipelineOptions, PromptTemplate, DEFAULT_K, DEFAULT_THRESHOLD};
use statrag_core::router::{Adjacency, AliasTable, RouterConfig};

pub const ENV_PREFIX: &str = "STATRAG_";
/// Separates nesting levels in override names, e.g. `STATRAG_EMBEDDER__DIM`.
pub const ENV_NESTING: &str = "__";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("environment override {name}: {reason}")]
    Env { name: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{field} points to {path}, which does not exist")]
    MissingFile { field: &'static str, path: PathBuf },
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_true() -> bool {
    true
}

fn default_bind() -> String {
    DEFAULT_BIND.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub corpus_root: PathBuf,
    pub index_path: PathBuf,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_true")]
    pub swi_enabled: bool,
    #[serde(default)]
    pub aliases_path: Option<PathBuf>,
    /// Neighbor table; the built-in land-border table when absent.
    #[serde(default)]
    pub adjacency_path: Option<PathBuf>,
    /// Expand "neighboring states" queries.
    #[serde(default = "default_true")]
    pub neighbor_expansion: bool,
    #[serde(default)]
    pub prompt_template_path: Option<PathBuf>,
    #[serde(default = "default_bind")]
    pub bind_address: String,
    #[serde(default)]
    pub chunking: ChunkConfig,
    #[serde(default)]
    pub swi_summarize: bool,
    #[serde(default)]
    pub include_federal: bool,
    #[serde(default = "default_true")]
    pub capture_timings: bool,
}

impl ServiceConfig {
    pub fn new(corpus_root: impl Into<PathBuf>, index_path: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            corpus_root: corpus_root.into(),
            index_path: index_path.into(),
            embedder: EmbedderSpec::default(),
            generator: GeneratorSpec::default(),
            k: DEFAULT_K,
            threshold: DEFAULT_THRESHOLD,
            swi_enabled: true,
            aliases_path: None,
            adjacency_path: None,
            neighbor_expansion: true,
            prompt_template_path: None,
            bind_address: DEFAULT_BIND.to_string(),
            chunking: ChunkConfig::default(),
            swi_summarize: false,
            include_federal: false,
            capture_timings: true,
        }
    }

    /// Read a config file, apply overrides from the process environment,
    /// resolve relative paths against the file's directory and validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        };
        let mut value: Value = serde_json::from_str(&text).map_err(parse_err)?;
        apply_env_overrides(&mut value, env)?;
        let mut config: ServiceConfig = serde_json::from_value(value).map_err(parse_err)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_root);
        fix(&mut self.index_path);
        for p in [
            &mut self.aliases_path,
            &mut self.adjacency_path,
            &mut self.prompt_template_path,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Scalar bounds, spec sanity and existence of the optional files.
    /// The corpus and index are checked by whichever command needs them.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k < 1 {
            return Err(ConfigError::Invalid(format!("k must be at least 1, got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::Invalid(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        self.embedder
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.generator
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (field, path) in [
            ("aliases_path", &self.aliases_path),
            ("adjacency_path", &self.adjacency_path),
            ("prompt_template_path", &self.prompt_template_path),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(ConfigError::MissingFile { field, path: p.clone() });
                }
            }
        }
        if self.bind_address.parse::<std::net::SocketAddr>().is_err() && !self.bind_address.contains(':') {
            return Err(ConfigError::Invalid(format!(
                "bind_address must be host:port, got {}",
                self.bind_address
            )));
        }
        Ok(())
    }

    /// Where the remote embedder's response cache lives: next to the index.
    pub fn embedding_cache_path(&self) -> PathBuf {
        let mut name = self.index_path.file_name().unwrap_or_default().to_os_string();
        name.push(".embcache.jsonl");
        self.index_path.with_file_name(name)
    }

    pub fn require_corpus(&self) -> Result<(), ConfigError> {
        if !self.corpus_root.exists() {
            return Err(ConfigError::MissingFile {
                field: "corpus_root",
                path: self.corpus_root.clone(),
            });
        }
        Ok(())
    }
}

/// Overwrite scalar leaves of `value` from `STATRAG_*` variables. Names map
/// to lowercase key paths with `__` between levels. Only keys the config
/// schema knows are touched; the leaf type decides how the value is parsed.
pub fn apply_env_overrides(
    value: &mut Value,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    let schema = override_schema();
    let defaults = serde_json::to_value(ServiceConfig::new("", "")).expect("config serializes");
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let path: Vec<String> = name[ENV_PREFIX.len()..]
            .split(ENV_NESTING)
            .map(|s| s.to_ascii_lowercase())
            .collect();
        let Some(template) = lookup(&schema, &path) else {
            continue;
        };
        if template.is_object() || template.is_array() {
            continue;
        }
        let parsed = parse_scalar(template, &raw).map_err(|reason| ConfigError::Env {
            name: name.clone(),
            reason,
        })?;
        set_path(value, &defaults, &path, parsed).map_err(|reason| ConfigError::Env { name, reason })?;
    }
    Ok(())
}

fn lookup<'a>(value: &'a Value, path: &[String]) -> Option<&'a Value> {
    let mut cur = value;
    for key in path {
        cur = cur.as_object()?.get(key)?;
    }
    Some(cur)
}

/// Every overridable key with a leaf of the right type. Optional strings
/// are filled in so they appear in the tree.
fn override_schema() -> Value {
    let mut c = ServiceConfig::new("", "");
    c.aliases_path = Some(PathBuf::new());
    c.adjacency_path = Some(PathBuf::new());
    c.prompt_template_path = Some(PathBuf::new());
    for s in [
        &mut c.embedder.endpoint_url,
        &mut c.embedder.model_name,
        &mut c.embedder.auth_env_var,
    ] {
        *s = Some(String::new());
    }
    for s in [
        &mut c.generator.endpoint_url,
        &mut c.generator.model_name,
        &mut c.generator.auth_env_var,
    ] {
        *s = Some(String::new());
    }
    serde_json::to_value(c).expect("config serializes")
}

fn parse_scalar(template: &Value, raw: &str) -> Result<Value, String> {
    match template {
        Value::Bool(_) => raw
            .trim()
            .to_ascii_lowercase()
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| format!("expected true or false, got {raw:?}")),
        Value::Number(n) if n.is_f64() => raw
            .trim()
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a number, got {raw:?}")),
        Value::Number(_) => raw
            .trim()
            .parse::<u64>()
            .map(|n| Value::Number(n.into()))
            .map_err(|_| format!("expected a non-negative integer, got {raw:?}")),
        _ => Ok(Value::String(raw.to_string())),
    }
}

fn set_path(value: &mut Value, defaults: &Value, path: &[String], leaf: Value) -> Result<(), String> {
    let Some((last, parents)) = path.split_last() else {
        return Err("empty key".into());
    };
    let mut cur = value;
    for (depth, key) in parents.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| format!("{key} is not an object"))?;
        cur = obj.entry(key.clone()).or_insert_with(|| {
            // a section absent from the file starts from its defaults
            lookup(defaults, &path[..=depth])
                .cloned()
                .unwrap_or_else(|| Value::Object(Map::new()))
        });
    }
    cur.as_object_mut()
        .ok_or_else(|| "parent is not an object".to_string())?
        .insert(last.clone(), leaf);
    Ok(())
}

/// A configured pipeline plus the state it needs flushed on exit.
pub struct Engine {
    pub config: ServiceConfig,
    pub pipeline: Pipeline,
    cache: Option<Arc<EmbeddingCache>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] statrag_core::corpus::CorpusError),
    #[error(transparent)]
    Embed(#[from] statrag_core::embed::EmbedError),
    #[error(transparent)]
    Generator(#[from] statrag_core::pipeline::GeneratorError),
    #[error(transparent)]
    Pipeline(#[from] statrag_core::pipeline::PipelineError),
    #[error(transparent)]
    Router(#[from] statrag_core::router::RouterError),
    #[error(transparent)]
    Index(#[from] statrag_core::index::IndexError),
}

impl Engine {
    pub fn new(config: ServiceConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let (embedder, cache): (Arc<dyn Embedder>, _) = match config.embedder.kind {
            EmbedderKind::LocalHash => (config.embedder.build()?, None),
            EmbedderKind::RemoteHttp => {
                let cache = Arc::new(EmbeddingCache::load(&config.embedding_cache_path())?);
                let remote = RemoteEmbedder::with_cache(config.embedder.clone(), cache.clone())?;
                (Arc::new(remote), Some(cache))
            }
        };
        let generator = config.generator.build()?;
        let aliases = config.aliases_path.as_deref().map(AliasTable::load).transpose()?;
        let adjacency = match (&config.adjacency_path, config.neighbor_expansion) {
            (_, false) => None,
            (Some(p), true) => Some(Adjacency::load(p)?),
            (None, true) => Some(Adjacency::builtin()),
        };
        let template = match &config.prompt_template_path {
            Some(p) => PromptTemplate::load(p)?,
            None => PromptTemplate::default(),
        };
        let mut pipeline = Pipeline::new(embedder, generator);
        pipeline.template = template;
        pipeline.router = RouterConfig::new(config.swi_enabled, aliases.as_ref(), adjacency, config.include_federal);
        pipeline.options = PipelineOptions {
            k: config.k,
            threshold: config.threshold,
            summarize_swi: config.swi_summarize,
            capture_timings: config.capture_timings,
        };
        Ok(Engine {
            config,
            pipeline,
            cache,
        })
    }

    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.pipeline, &self.config.generator.describe())
    }

    pub fn chunks(&self) -> Result<(Vec<Chunk>, Vec<IngestWarning>), EngineError> {
        self.chunks_from(&self.config.corpus_root)
    }

    pub fn chunks_from(&self, root: &Path) -> Result<(Vec<Chunk>, Vec<IngestWarning>), EngineError> {
        if !root.exists() {
            return Err(ConfigError::MissingFile {
                field: "corpus_root",
                path: root.to_path_buf(),
            }
            .into());
        }
        let corpus = load_corpus(root)?;
        Ok((
            chunk_documents(&corpus.documents, &self.config.chunking),
            corpus.warnings,
        ))
    }

    pub fn build_index(&self) -> Result<(VectorIndex, Vec<IngestWarning>), EngineError> {
        let (chunks, warnings) = self.chunks()?;
        let index = VectorIndex::build(&chunks, self.pipeline.embedder.as_ref())?;
        Ok((index, warnings))
    }

    /// Load the saved index, or build one from the corpus when no index
    /// file exists. Fails when the index was built by another embedder.
    pub fn open_index(&self) -> Result<VectorIndex, EngineError> {
        let index = if self.config.index_path.exists() {
            VectorIndex::load(&self.config.index_path)?
        } else {
            tracing::warn!(
                path = %self.config.index_path.display(),
                "no index file; building from corpus in memory"
            );
            self.build_index()?.0
        };
        let fp = self.pipeline.embedder.fingerprint();
        if index.fingerprint() != fp {
            return Err(statrag_core::pipeline::PipelineError::FingerprintMismatch {
                embedder: fp,
                index: index.fingerprint().to_string(),
            }
            .into());
        }
        Ok(index)
    }

    /// Write the remote embedding cache, if any.
    pub fn persist_cache(&self) -> Result<(), EngineError> {
        if let Some(cache) = &self.cache {
            cache.save(&self.config.embedding_cache_path())?;
        }
        Ok(())
    }
}
