//! Experiment configuration: a TOML file with `${VAR}` interpolation.

use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::corpus::{HistoryMode, Schema};
use crate::embedder::{EmbedTextMode, ServiceConfig};
use crate::llm::LlmBackendDescriptor;
use crate::prompt::{DecodingStrategy, PromptConfig, TokenCounterConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    /// Demonstration candidates.
    pub train: PathBuf,
    /// Samples to evaluate.
    pub test: PathBuf,
    /// Schema JSON; the built-in MultiWOZ schema when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
}

impl CorpusPaths {
    pub fn load_schema(&self) -> Result<Schema, HarnessError> {
        match &self.schema {
            Some(path) => Ok(Schema::load(path)?),
            None => Ok(Schema::multiwoz()),
        }
    }
}

/// Where sample vectors come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// An emb-jsonl store covering train and test ids.
    Precomputed { store: PathBuf },
    /// Hashing embedder computed in process.
    Mock { dim: usize },
    /// Embedding endpoint queried at run start.
    Service(ServiceConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub source: EmbeddingSource,
    /// Speaker tags in embedded text.
    #[serde(default = "yes")]
    pub speaker_tags: bool,
}

fn yes() -> bool {
    true
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { source: EmbeddingSource::Mock { dim: 256 }, speaker_tags: true }
    }
}

/// Lists of factor values; the grid is their cartesian product. Absent axes
/// keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_text_mode: Option<Vec<EmbedTextMode>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history_mode: Option<Vec<HistoryMode>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speaker_tags: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoding_strategy: Option<Vec<DecodingStrategy>>,
    /// Precomputed stores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_store: Option<Vec<PathBuf>>,
}

impl GridAxes {
    pub fn size(&self) -> usize {
        fn len<T>(axis: &Option<Vec<T>>) -> usize {
            axis.as_ref().map_or(1, Vec::len)
        }
        len(&self.embed_text_mode)
            * len(&self.history_mode)
            * len(&self.speaker_tags)
            * len(&self.k)
            * len(&self.decoding_strategy)
            * len(&self.embedding_store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Prefix of every configuration id.
    #[serde(default = "default_name")]
    pub name: String,
    pub output_dir: PathBuf,
    /// Evaluate only this many test samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_limit: Option<usize>,
    /// Shuffle test samples with this seed before applying `sample_limit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_max_grid")]
    pub max_grid_size: usize,
    /// Write every prompt next to the records.
    #[serde(default)]
    pub dump_prompts: bool,
    pub corpus: CorpusPaths,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default = "LlmBackendDescriptor::mock")]
    pub backend: LlmBackendDescriptor,
    #[serde(default)]
    pub tokens: TokenCounterConfig,
    #[serde(default)]
    pub grid: GridAxes,
}

fn short(mode: HistoryMode) -> &'static str {
    match mode {
        HistoryMode::UserOnly => "u",
        HistoryMode::UserAgent => "ua",
    }
}

fn default_name() -> String {
    "run".into()
}

fn default_parallelism() -> usize {
    4
}

fn default_max_grid() -> usize {
    64
}

/// Replaces `${VAR}` with the variable's value. `$${` escapes a literal `${`.
pub fn interpolate_env(text: &str) -> Result<String, HarnessError> {
    let pattern = Regex::new(r"\$?\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static pattern");
    let mut missing = None;
    let out = pattern.replace_all(text, |caps: &regex::Captures<'_>| {
        let whole = &caps[0];
        if let Some(literal) = whole.strip_prefix('$').filter(|w| w.starts_with("${")) {
            return literal.to_string();
        }
        std::env::var(&caps[1]).unwrap_or_else(|_| {
            missing.get_or_insert_with(|| caps[1].to_string());
            String::new()
        })
    });
    match missing {
        Some(var) => Err(HarnessError::Config(format!("environment variable '{var}' is not set"))),
        None => Ok(out.into_owned()),
    }
}

impl ExperimentConfig {
    /// A config with default factors over the given corpora.
    pub fn new(train: impl Into<PathBuf>, test: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            name: default_name(),
            output_dir: output_dir.into(),
            sample_limit: None,
            seed: None,
            parallelism: default_parallelism(),
            max_grid_size: default_max_grid(),
            dump_prompts: false,
            corpus: CorpusPaths { train: train.into(), test: test.into(), schema: None },
            embedding: EmbeddingConfig::default(),
            prompt: PromptConfig::default(),
            backend: LlmBackendDescriptor::mock(),
            tokens: TokenCounterConfig::default(),
            grid: GridAxes::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let text = interpolate_env(text)?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.corpus.train);
        fix(&mut self.corpus.test);
        if let Some(schema) = &mut self.corpus.schema {
            fix(schema);
        }
        if let EmbeddingSource::Precomputed { store } = &mut self.embedding.source {
            fix(store);
        }
        if let Some(stores) = &mut self.grid.embedding_store {
            stores.iter_mut().for_each(fix);
        }
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.prompt.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.backend.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("invalid run name '{}'", self.name));
        }
        let mut files = vec![&self.corpus.train, &self.corpus.test];
        files.extend(&self.corpus.schema);
        match &self.embedding.source {
            EmbeddingSource::Precomputed { store } => files.push(store),
            EmbeddingSource::Mock { dim } if *dim < 8 => {
                return bad(format!("mock embedding dim must be at least 8, got {dim}"));
            }
            _ => {}
        }
        files.extend(self.grid.embedding_store.iter().flatten());
        for file in files {
            if !file.is_file() {
                return bad(format!("file not found: {}", file.display()));
            }
        }
        let size = self.grid.size();
        if size > self.max_grid_size {
            return bad(format!("grid has {size} runs, above max_grid_size {}", self.max_grid_size));
        }
        Ok(())
    }

    /// Stable identifier of the factor settings.
    pub fn config_id(&self) -> String {
        let p = &self.prompt;
        let mut id = format!(
            "{}_emb-{}_hist-{}_tags-{}_k{}_{}",
            self.name,
            short(p.embed_text_mode.history_mode()),
            short(p.history_mode),
            if p.speaker_tags { "on" } else { "off" },
            p.max_demos,
            match p.decoding_strategy {
                DecodingStrategy::SlotValueGivenKey => "slot",
                DecodingStrategy::KeyValueGeneration => "kv",
            }
        );
        if let EmbeddingSource::Precomputed { store } = &self.embedding.source {
            if self.grid.embedding_store.is_some() {
                let stem = store.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                id.push_str(&format!("_store-{stem}"));
            }
        }
        id
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.config_id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name = "demo"
output_dir = "out"
sample_limit = 50
seed = 7

[corpus]
train = "train.jsonl"
test = "test.jsonl"

[embedding]
speaker_tags = true
source = { kind = "mock", dim = 64 }

[prompt]
max_demos = 3
history_mode = "user_only"
decoding_strategy = "key_value_generation"

[backend]
kind = "http_completion"
endpoint_url = "${ICL_DST_TEST_URL}/v1/completions"
model_name = "some-model"

[grid]
k = [1, 3, 10]
"#;

    #[test]
    fn parses_and_round_trips() {
        std::env::set_var("ICL_DST_TEST_URL", "http://localhost:8000");
        let config = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(config.prompt.max_demos, 3);
        assert_eq!(config.prompt.history_mode, HistoryMode::UserOnly);
        assert_eq!(config.backend.endpoint_url.as_deref(), Some("http://localhost:8000/v1/completions"));
        assert_eq!(config.embedding.source, EmbeddingSource::Mock { dim: 64 });
        assert_eq!(config.grid.size(), 3);
        let again = ExperimentConfig::from_toml(&config.to_toml().unwrap()).unwrap();
        assert_eq!(again, config);
        assert_eq!(config.config_id(), "demo_emb-ua_hist-u_tags-on_k3_kv");
    }

    #[test]
    fn service_source_round_trips() {
        let mut config = ExperimentConfig::new("a", "b", "c");
        config.embedding.source = EmbeddingSource::Service(ServiceConfig {
            url: "http://x/embed".into(),
            model: "m".into(),
            dim: Some(16),
            batch_size: 8,
            parallelism: 2,
            timeout_secs: 5.0,
            retry: Default::default(),
            api_key_env: None,
        });
        let again = ExperimentConfig::from_toml(&config.to_toml().unwrap()).unwrap();
        assert_eq!(again, config);
    }

    #[test]
    fn missing_variable() {
        let err = interpolate_env("url = \"${ICL_DST_SURELY_UNSET_VAR}\"").unwrap_err();
        assert!(err.to_string().contains("ICL_DST_SURELY_UNSET_VAR"));
        assert_eq!(interpolate_env("a = \"$${HOME}\"").unwrap(), "a = \"${HOME}\"");
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(ExperimentConfig::from_toml("output_dir='x'\nbogus=1\n[corpus]\ntrain='a'\ntest='b'").is_err());
    }

    #[test]
    fn validation() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.jsonl");
        std::fs::write(&train, "").unwrap();
        let mut config = ExperimentConfig::new(&train, dir.path().join("missing.jsonl"), dir.path());
        assert!(config.validate().unwrap_err().to_string().contains("missing.jsonl"));
        config.corpus.test = train.clone();
        config.validate().unwrap();
        config.grid.k = Some((0..100).collect());
        assert!(config.validate().is_err());
        config.grid.k = None;
        config.parallelism = 0;
        assert!(config.validate().is_err());
    }
}
