//! Pipeline configuration: a single JSON file, validated before any stage runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::MatchMode;
use crate::gate::{VotePolicy, DEFAULT_THRESHOLD};
use crate::http::Endpoint;
use crate::retrieval::{DEFAULT_DIMENSION, DEFAULT_K};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub gold: PathBuf,
    pub transcripts: PathBuf,
    /// Labelled support set for retrieval and the rule lexicon.
    pub train_gold: PathBuf,
    /// Optional transcripts for the support set; otherwise the gold `text` field is used.
    #[serde(default)]
    pub train_transcripts: Option<PathBuf>,
    #[serde(default)]
    pub ontology: Option<PathBuf>,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub aliases: Option<PathBuf>,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub index: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub policy: VotePolicy,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Treat an unparseable LLM presence answer as "no event" instead of failing.
    #[serde(default)]
    pub lenient: bool,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub same_event_type_filter: bool,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: DEFAULT_K,
            same_event_type_filter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Remote {
        endpoint: Endpoint,
        model: String,
        #[serde(default)]
        params: Map<String, Value>,
    },
    Mock {
        script: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageProviders {
    pub presence: String,
    pub trigger: String,
    pub argument: String,
    /// Defaults to the argument-stage provider.
    #[serde(default)]
    pub format: Option<String>,
}

impl StageProviders {
    pub fn format(&self) -> &str {
        self.format.as_deref().unwrap_or(&self.argument)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingConfig {
    /// Deterministic hashed bag of tokens.
    #[serde(alias = "hash")]
    Mock {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Remote {
        endpoint: Endpoint,
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

fn default_batch() -> usize {
    32
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Mock {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnedConfig {
    File {
        path: PathBuf,
    },
    Remote {
        endpoint: Endpoint,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    #[serde(default)]
    pub corrective: bool,
}

fn default_attempts() -> usize {
    crate::llm::DEFAULT_MAX_ATTEMPTS
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig {
            max_attempts: default_attempts(),
            corrective: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcurrencyConfig {
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_workers")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub min_interval_ms: u64,
}

fn default_workers() -> usize {
    4
}

impl Default for ConcurrencyConfig {
    fn default() -> Self {
        ConcurrencyConfig {
            workers: default_workers(),
            max_in_flight: default_workers(),
            min_interval_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    #[serde(default)]
    pub mode: MatchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Row label in ablation tables; defaults to the trigger-stage provider name.
    #[serde(default)]
    pub label: Option<String>,
    pub paths: Paths,
    pub gate: GateConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    pub providers: BTreeMap<String, ProviderConfig>,
    pub stages: StageProviders,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    pub learned: LearnedConfig,
    #[serde(default)]
    pub retry: RetryConfig,
    #[serde(default)]
    pub concurrency: ConcurrencyConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (stage, name) in [
            ("presence", self.stages.presence.as_str()),
            ("trigger", &self.stages.trigger),
            ("argument", &self.stages.argument),
            ("format", self.stages.format()),
        ] {
            if !self.providers.contains_key(name) {
                return Err(Error::Config(format!("stage {stage} uses undefined provider {name:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gate.threshold) {
            return Err(Error::Config(format!("gate.threshold {} is outside [0, 1]", self.gate.threshold)));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::Config("retry.max_attempts must be at least 1".into()));
        }
        if self.concurrency.workers == 0 || self.concurrency.max_in_flight == 0 {
            return Err(Error::Config("concurrency limits must be at least 1".into()));
        }
        if let EmbeddingConfig::Mock { dimension: 0 } = self.embedding {
            return Err(Error::Config("embedding.dimension must be at least 1".into()));
        }
        for (name, p) in &self.providers {
            if let ProviderConfig::Remote { params, .. } = p {
                if params.contains_key("messages") || params.contains_key("model") {
                    return Err(Error::Config(format!("provider {name}: params may not set model or messages")));
                }
            }
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        self.base_dir = base.to_path_buf();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [&mut paths.gold, &mut paths.transcripts, &mut paths.train_gold, &mut paths.output_dir] {
            fix(p);
        }
        for p in [
            &mut paths.train_transcripts,
            &mut paths.ontology,
            &mut paths.templates,
            &mut paths.aliases,
            &mut paths.cache,
            &mut paths.index,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for p in self.providers.values_mut() {
            if let ProviderConfig::Mock { script } = p {
                fix(script);
            }
        }
        if let LearnedConfig::File { path } = &mut self.learned {
            fix(path);
        }
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.stages.trigger)
    }

    /// SHA-256 over the canonical JSON of everything that affects outputs.
    /// Concurrency settings and absolute path prefixes are excluded.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("serializable");
        if let Value::Object(map) = &mut value {
            map.remove("concurrency");
        }
        strip_prefix(&mut value, &self.base_dir);
        let canonical = serde_json::to_string(&value).expect("serializable");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn strip_prefix(value: &mut Value, base: &Path) {
    match value {
        Value::String(s) => {
            if let Ok(rel) = Path::new(s.as_str()).strip_prefix(base) {
                *s = rel.to_string_lossy().into_owned();
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| strip_prefix(v, base)),
        Value::Object(map) => map.values_mut().for_each(|v| strip_prefix(v, base)),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "paths": {"gold": "g.jsonl", "transcripts": "t.jsonl", "train_gold": "tr.jsonl", "output_dir": "out"},
        "gate": {"policy": "three"},
        "providers": {"m": {"kind": "mock", "script": "mock.json"}},
        "stages": {"presence": "m", "trigger": "m", "argument": "m"},
        "learned": {"kind": "file", "path": "v.jsonl"}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = PipelineConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.gate.policy, VotePolicy::All);
        assert_eq!((c.retrieval.k, c.stages.format(), c.label()), (10, "m", "m"));
        assert_eq!(c.embedding, EmbeddingConfig::default());
        assert_eq!(c.scoring.mode, MatchMode::Multiset);
    }

    #[test]
    fn unknown_keys_and_bad_references_are_rejected() {
        let extra = MINIMAL.replacen("\"gate\"", "\"gaet\": 1, \"gate\"", 1);
        assert!(matches!(PipelineConfig::from_json(&extra), Err(Error::Config(_))));
        let bad = MINIMAL.replace("\"argument\": \"m\"", "\"argument\": \"x\"");
        assert!(PipelineConfig::from_json(&bad).unwrap_err().to_string().contains("\"x\""));
        let bad = MINIMAL.replace("\"three\"", "\"sometimes\"");
        assert!(PipelineConfig::from_json(&bad).is_err());
        let bad = MINIMAL.replace("\"policy\": \"three\"", "\"policy\": \"three\", \"threshold\": 2");
        assert!(PipelineConfig::from_json(&bad).is_err());
    }

    #[test]
    fn remote_provider_shape() {
        let cfg = MINIMAL.replace(
            r#"{"kind": "mock", "script": "mock.json"}"#,
            r#"{"kind": "remote", "endpoint": {"url": "http://x", "api_key_env": "K"}, "model": "gpt", "params": {"temperature": 0}}"#,
        );
        let c = PipelineConfig::from_json(&cfg).unwrap();
        let ProviderConfig::Remote { endpoint, model, .. } = &c.providers["m"] else { panic!() };
        assert_eq!((endpoint.api_key_env.as_deref(), model.as_str()), (Some("K"), "gpt"));
    }

    #[test]
    fn hash_ignores_concurrency_and_location() {
        let a = PipelineConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.concurrency.workers = 9;
        assert_eq!(a.hash(), b.hash());
        b.retrieval.k = 3;
        assert_ne!(a.hash(), b.hash());

        let mut x = a.clone();
        x.resolve(Path::new("/one"));
        let mut y = a.clone();
        y.resolve(Path::new("/two"));
        assert_eq!(x.hash(), y.hash());
    }
}
