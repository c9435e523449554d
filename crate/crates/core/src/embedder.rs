//! Sentence embeddings for turn texts.
//!
//! Three interchangeable backends implement [`Embedder`]: a precomputed
//! [`EmbeddingStore`] (looked up by sample id), a remote embeddings service,
//! and the deterministic [`MockEmbedder`]. Every vector handed out is unit
//! length, so cosine similarity is a plain dot product downstream.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{HistoryMode, TurnSample};
use crate::http::{self, HttpError, RetryPolicy};

pub const STORE_FORMAT: &str = "emb-jsonl/1";

/// Stored vectors are unit length within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-5;
/// Loaded vectors further than this from unit length trigger a warning.
pub const RENORMALIZE_WARN: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("no embedding for sample '{0}'")]
    Missing(String),
    #[error("invalid vector: {0}")]
    InvalidVector(String),
    /// Worth retrying: timeouts and non-success statuses.
    #[error("embedding service: {0}")]
    Service(String),
    #[error("configuration: {0}")]
    Config(String),
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Service(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps raw values; they must be finite.
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidVector(format!("non-finite entry at {pos}")));
        }
        Ok(Self(values))
    }

    /// Wraps and L2-normalizes raw values.
    pub fn normalized(values: Vec<f32>) -> Result<Self, EmbedError> {
        let mut v = Self::new(values)?;
        v.normalize()?;
        Ok(v)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn normalize(&mut self) -> Result<(), EmbedError> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(EmbedError::InvalidVector("zero vector".into()));
        }
        for x in &mut self.0 {
            *x = (f64::from(*x) / norm) as f32;
        }
        Ok(())
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Which utterances go into the text that gets embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedTextMode {
    UserOnly,
    UserAgent,
}

impl EmbedTextMode {
    pub fn history_mode(self) -> HistoryMode {
        match self {
            EmbedTextMode::UserOnly => HistoryMode::UserOnly,
            EmbedTextMode::UserAgent => HistoryMode::UserAgent,
        }
    }

    pub fn as_str(self) -> &'static str {
        self.history_mode().as_str()
    }
}

impl fmt::Display for EmbedTextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EmbedTextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.parse::<HistoryMode>()? {
            HistoryMode::UserOnly => EmbedTextMode::UserOnly,
            HistoryMode::UserAgent => EmbedTextMode::UserAgent,
        })
    }
}

/// The text of a sample that gets embedded. Shared with the Python exporter:
/// changing it invalidates every precomputed store.
pub fn embed_text(sample: &TurnSample, mode: EmbedTextMode, speaker_tags: bool) -> String {
    sample.render_history(mode.history_mode(), speaker_tags)
}

/// One text to embed, with the id a precomputed store would know it by.
#[derive(Debug, Clone, Copy)]
pub struct EmbedItem<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

pub trait Embedder: Send + Sync {
    fn model_name(&self) -> &str;

    /// Dimension, when known before the first call.
    fn dimension(&self) -> Option<usize>;

    /// One unit vector per item, in input order.
    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

pub fn embed_texts(
    items: &[EmbedItem<'_>],
    backend: &dyn Embedder,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    backend.embed(items)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Bag-of-tokens hashing embedding: lowercased whitespace tokens are counted in
/// `hash % dimension` buckets and the counts L2-normalized. A text without
/// tokens is treated as the single empty token.
///
/// Panics if `dimension < 8`.
pub fn mock_embed(text: &str, dimension: usize) -> EmbeddingVector {
    assert!(dimension >= 8, "mock embedding dimension must be at least 8");
    let mut counts = vec![0f32; dimension];
    let lowered = text.to_lowercase();
    let mut any = false;
    for token in lowered.split_whitespace() {
        counts[(fnv1a64(token.as_bytes()) % dimension as u64) as usize] += 1.0;
        any = true;
    }
    if !any {
        counts[(fnv1a64(b"") % dimension as u64) as usize] = 1.0;
    }
    EmbeddingVector::normalized(counts).expect("non-zero bucket counts")
}

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dimension: usize,
    name: String,
}

impl MockEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbedError> {
        if dimension < 8 {
            return Err(EmbedError::Config(format!(
                "mock embedder needs dimension >= 8, got {dimension}"
            )));
        }
        Ok(Self { dimension, name: format!("mock-fnv1a-{dimension}") })
    }
}

impl Embedder for MockEmbedder {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dimension)
    }

    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(items.iter().map(|item| mock_embed(item.text, self.dimension)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub format: String,
    pub model: String,
    pub dim: usize,
    pub count: usize,
    /// Anything else the producer recorded (text mode, pooling, ...).
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreRow {
    id: String,
    v: Vec<f32>,
}

/// What `load_store` had to fix.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoreLoadReport {
    /// Vectors re-normalized silently (deviation above 1e-5).
    pub renormalized: usize,
    /// Vectors whose norm deviated by more than 1e-3 (each logged).
    pub warnings: usize,
}

/// Precomputed, id-keyed unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub model_name: String,
    dimension: usize,
    entries: IndexMap<String, EmbeddingVector>,
    pub extra: serde_json::Map<String, Value>,
}

impl EmbeddingStore {
    pub fn new(model_name: impl Into<String>, dimension: usize) -> Self {
        Self {
            model_name: model_name.into(),
            dimension,
            entries: IndexMap::new(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.entries.iter().map(|(id, v)| (id.as_str(), v))
    }

    /// Adds a vector, normalizing it. Duplicate ids and dimension mismatches
    /// are rejected.
    pub fn insert(&mut self, id: impl Into<String>, mut vector: EmbeddingVector) -> Result<(), EmbedError> {
        let id = id.into();
        if vector.dim() != self.dimension {
            return Err(EmbedError::Config(format!(
                "vector for '{id}' has dimension {} but the store is {}",
                vector.dim(),
                self.dimension
            )));
        }
        if self.entries.contains_key(&id) {
            return Err(EmbedError::InvalidVector(format!("duplicate sample_id '{id}'")));
        }
        if !vector.is_unit() {
            vector.normalize()?;
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn header(&self) -> StoreHeader {
        StoreHeader {
            format: STORE_FORMAT.into(),
            model: self.model_name.clone(),
            dim: self.dimension,
            count: self.entries.len(),
            extra: self.extra.clone(),
        }
    }

    /// Stable digest over model name, dimension, ids and vector bits.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.model_name.as_bytes());
        hasher.update([0]);
        hasher.update((self.dimension as u64).to_le_bytes());
        for (id, v) in &self.entries {
            hasher.update(id.as_bytes());
            hasher.update([0]);
            for x in v.values() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    pub fn write_to<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut writer = BufWriter::new(writer);
        serde_json::to_writer(&mut writer, &self.header())?;
        writer.write_all(b"\n")?;
        for (id, v) in &self.entries {
            write_row(&mut writer, id, v)?;
        }
        writer.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        let path = path.as_ref();
        let io = |source| EmbedError::Io { path: path.to_path_buf(), source };
        let file = std::fs::File::create(path).map_err(io)?;
        self.write_to(file).map_err(io)
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<(Self, StoreLoadReport), EmbedError> {
        let mut lines = reader.lines();
        let header_line = match lines.next() {
            Some(line) => line.map_err(|e| EmbedError::Format { line: 1, message: e.to_string() })?,
            None => return Err(EmbedError::Format { line: 1, message: "missing header".into() }),
        };
        let header: StoreHeader = serde_json::from_str(&header_line)
            .map_err(|e| EmbedError::Format { line: 1, message: format!("bad header: {e}") })?;
        if header.format != STORE_FORMAT {
            return Err(EmbedError::Format {
                line: 1,
                message: format!("unsupported format '{}'", header.format),
            });
        }
        if header.dim == 0 {
            return Err(EmbedError::Format { line: 1, message: "dimension must be positive".into() });
        }
        let mut store = EmbeddingStore::new(header.model, header.dim);
        store.extra = header.extra;
        let mut report = StoreLoadReport::default();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line.map_err(|e| EmbedError::Format { line: line_no, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let fail = |message: String| EmbedError::Format { line: line_no, message };
            let row: StoreRow = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
            if row.v.len() != header.dim {
                return Err(fail(format!(
                    "row '{}' has {} values but the header declares dim {}",
                    row.id,
                    row.v.len(),
                    header.dim
                )));
            }
            let mut vector =
                EmbeddingVector::new(row.v).map_err(|e| fail(format!("row '{}': {e}", row.id)))?;
            let deviation = (vector.norm() - 1.0).abs();
            if deviation > UNIT_TOLERANCE {
                if deviation > RENORMALIZE_WARN {
                    log::warn!("row '{}' has norm {:.6}; re-normalized", row.id, vector.norm());
                    report.warnings += 1;
                }
                vector.normalize().map_err(|e| fail(format!("row '{}': {e}", row.id)))?;
                report.renormalized += 1;
            }
            if store.entries.insert(row.id.clone(), vector).is_some() {
                return Err(fail(format!("duplicate sample_id '{}'", row.id)));
            }
        }
        if store.len() != header.count {
            return Err(EmbedError::Format {
                line: 1,
                message: format!("header declares {} entries, found {}", header.count, store.len()),
            });
        }
        Ok((store, report))
    }

    pub fn load_with_report(path: impl AsRef<Path>) -> Result<(Self, StoreLoadReport), EmbedError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|source| EmbedError::Io { path: path.to_path_buf(), source })?;
        Self::read_from(BufReader::new(file))
    }
}

pub(crate) fn write_row<W: Write>(writer: &mut W, id: &str, v: &EmbeddingVector) -> std::io::Result<()> {
    serde_json::to_writer(&mut *writer, &json!({"id": id, "v": v.values()}))?;
    writer.write_all(b"\n")
}

/// Loads an emb-jsonl store, re-normalizing vectors that drifted from unit
/// length.
pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbedError> {
    EmbeddingStore::load_with_report(path).map(|(store, _)| store)
}

impl Embedder for EmbeddingStore {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dimension)
    }

    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        items
            .iter()
            .map(|item| self.get(item.id).cloned().ok_or_else(|| EmbedError::Missing(item.id.into())))
            .collect()
    }
}

/// Settings for an embeddings HTTP endpoint speaking
/// `{"model", "input": [...]}` → `{"data": [{"index", "embedding"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub url: String,
    pub model: String,
    /// Expected dimension; a mismatching response is a configuration error.
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_batch_size() -> usize {
    64
}

fn default_parallelism() -> usize {
    4
}

fn default_timeout() -> f64 {
    60.0
}

pub struct ServiceEmbedder {
    config: ServiceConfig,
    client: reqwest::blocking::Client,
    pool: rayon::ThreadPool,
    api_key: Option<String>,
}

impl ServiceEmbedder {
    pub fn new(config: ServiceConfig) -> Result<Self, EmbedError> {
        if config.batch_size == 0 || config.parallelism == 0 {
            return Err(EmbedError::Config("batch_size and parallelism must be positive".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| EmbedError::Config(e.to_string()))?;
        let api_key = config.api_key_env.as_deref().and_then(|var| std::env::var(var).ok());
        Ok(Self {
            client: http::client(Duration::from_secs_f64(config.timeout_secs)),
            config,
            pool,
            api_key,
        })
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let body = json!({"model": self.config.model, "input": texts});
        let response = http::post_json(
            &self.client,
            &self.config.url,
            &body,
            self.api_key.as_deref(),
            &self.config.retry,
        )
        .map_err(|e| match e {
            HttpError::Decode(msg) => EmbedError::Config(format!("unexpected response: {msg}")),
            other => EmbedError::Service(other.to_string()),
        })?;
        let data = response
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Config("response has no 'data' array".into()))?;
        let mut slots: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map(|i| i as usize)
                .unwrap_or(pos);
            let values: Vec<f32> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| EmbedError::Config(format!("data[{pos}] has no embedding")))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<_>>()
                .ok_or_else(|| EmbedError::Config(format!("data[{pos}] has non-numeric values")))?;
            if let Some(expected) = self.config.dim {
                if values.len() != expected {
                    return Err(EmbedError::Config(format!(
                        "service returned dimension {} but {expected} was expected",
                        values.len()
                    )));
                }
            }
            let slot = slots
                .get_mut(index)
                .ok_or_else(|| EmbedError::Config(format!("response index {index} out of range")))?;
            *slot = Some(EmbeddingVector::normalized(values)?);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| EmbedError::Config(format!("response is missing index {i}"))))
            .collect()
    }
}

impl Embedder for ServiceEmbedder {
    fn model_name(&self) -> &str {
        &self.config.model
    }

    fn dimension(&self) -> Option<usize> {
        self.config.dim
    }

    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let texts: Vec<&str> = items.iter().map(|i| i.text).collect();
        let batches: Vec<Result<Vec<EmbeddingVector>, EmbedError>> = self.pool.install(|| {
            texts
                .par_chunks(self.config.batch_size)
                .map(|chunk| self.embed_batch(chunk))
                .collect()
        });
        let mut out = Vec::with_capacity(items.len());
        for batch in batches {
            out.extend(batch?);
        }
        let dims: std::collections::BTreeSet<usize> = out.iter().map(|v| v.dim()).collect();
        if dims.len() > 1 {
            return Err(EmbedError::Config(format!("service returned mixed dimensions {dims:?}")));
        }
        Ok(out)
    }
}
