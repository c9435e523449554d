//! One experiment: embed, retrieve, prompt, decode, repair, score.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EmbeddingSource, ExperimentConfig, GridAxes};
use super::records::{read_records, RecordWriter, RepairSummary, SampleRecord, SampleStatus, SlotOutput};
use super::HarnessError;
use crate::corpus::{Corpus, DialogueState, Schema, TurnSample, NOT_MENTIONED};
use crate::embedder::{embed_text, EmbedItem, Embedder, EmbeddingStore, MockEmbedder, ServiceEmbedder};
use crate::eval::{
    aggregate_relevance_coverage, micro_metrics, relevance_coverage, AggregateRelevanceCoverage, KeyOverlap,
    Metrics, MetricsRow, Prediction,
};
use crate::llm::{generate_key_values, predict_slot_value, CompletionBackend, GenerationParams};
use crate::prompt::{
    assemble_prompt, dump_prompt, slot_targets, DecodingStrategy, PromptError, RenderedPrompt, SlotTarget,
    TokenCounter,
};
use crate::repair::{repair_and_parse, to_state};
use crate::retriever::{RetrievalResult, Retriever};

const RECORDS_FILE: &str = "records.jsonl";
const METRICS_FILE: &str = "metrics.json";
const CONFIG_FILE: &str = "config.toml";
const EMBED_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop after processing this many new samples (an interruption).
    pub max_new_samples: Option<usize>,
}

/// Loaded corpora and the selected test samples.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub schema: Schema,
    pub train: Corpus,
    pub test: Vec<TurnSample>,
}

/// Neighbours per test sample id, in rank order.
pub type Retrievals = BTreeMap<String, RetrievalResult>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_id: String,
    /// All selected samples have records.
    pub complete: bool,
    pub samples: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub unfittable: usize,
    pub metrics: Metrics,
    pub relevance_coverage: Option<AggregateRelevanceCoverage>,
    pub repair_status: BTreeMap<String, usize>,
    pub repair_fixes: BTreeMap<String, usize>,
    /// Samples processed by this invocation.
    #[serde(skip)]
    pub new_samples: usize,
    /// Backend calls made by this invocation.
    #[serde(skip)]
    pub backend_calls: usize,
}

impl RunReport {
    pub fn row(&self) -> MetricsRow {
        let rc = self.relevance_coverage;
        MetricsRow {
            config_id: self.config_id.clone(),
            status: if self.complete { "ok" } else { "incomplete" }.into(),
            precision: self.metrics.precision,
            recall: self.metrics.recall,
            relevance_micro: rc.map(|r| r.micro.relevance),
            coverage_micro: rc.map(|r| r.micro.coverage),
            relevance_macro: rc.map(|r| r.macro_.relevance),
            coverage_macro: rc.map(|r| r.macro_.coverage),
            samples: self.samples,
            succeeded: self.succeeded,
            failed: self.failed,
            unfittable: self.unfittable,
            correct: self.metrics.correct,
            predicted_total: self.metrics.predicted_total,
            gold_total: self.metrics.gold_total,
        }
    }
}

pub fn load_inputs(config: &ExperimentConfig) -> Result<Inputs, HarnessError> {
    let schema = config.corpus.load_schema()?;
    let train = Corpus::load(&config.corpus.train)?;
    train.validate_schema(&schema)?;
    let test = Corpus::load(&config.corpus.test)?;
    test.validate_schema(&schema)?;

    let mut order: Vec<usize> = (0..test.len()).collect();
    if let Some(seed) = config.seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    if let Some(limit) = config.sample_limit {
        order.truncate(limit);
    }
    order.sort_unstable();
    let test = order.into_iter().map(|i| test.samples()[i].clone()).collect();
    Ok(Inputs { schema, train, test })
}

fn all_samples(inputs: &Inputs) -> impl Iterator<Item = &TurnSample> {
    inputs.train.samples().iter().chain(&inputs.test)
}

/// Vectors for every train sample and every selected test sample.
pub fn sample_vectors(config: &ExperimentConfig, inputs: &Inputs) -> Result<EmbeddingStore, HarnessError> {
    let mode = config.prompt.embed_text_mode;
    let tags = config.embedding.speaker_tags;
    let embedder: Box<dyn Embedder> = match &config.embedding.source {
        EmbeddingSource::Precomputed { store } => {
            let (store, report) = EmbeddingStore::load_with_report(store)?;
            if report.warnings > 0 {
                log::warn!("{} store vectors were far from unit length", report.warnings);
            }
            check_store_mode(&store, config)?;
            if let Some(missing) = all_samples(inputs).find(|s| !store.contains(&s.sample_id)) {
                return Err(HarnessError::Config(format!(
                    "embedding store has no vector for sample '{}'",
                    missing.sample_id
                )));
            }
            return Ok(store);
        }
        EmbeddingSource::Mock { dim } => Box::new(MockEmbedder::new(*dim)?),
        EmbeddingSource::Service(service) => Box::new(ServiceEmbedder::new(service.clone())?),
    };

    let mut seen = HashSet::new();
    let samples: Vec<&TurnSample> = all_samples(inputs).filter(|s| seen.insert(s.sample_id.as_str())).collect();
    let texts: Vec<String> = samples.iter().map(|s| embed_text(s, mode, tags)).collect();
    let mut vectors = Vec::with_capacity(samples.len());
    for (chunk, text_chunk) in samples.chunks(EMBED_BATCH).zip(texts.chunks(EMBED_BATCH)) {
        let items: Vec<EmbedItem<'_>> = chunk
            .iter()
            .zip(text_chunk)
            .map(|(s, t)| EmbedItem { id: &s.sample_id, text: t })
            .collect();
        vectors.extend(embedder.embed(&items)?);
    }
    let dim = vectors.first().map_or(embedder.dimension().unwrap_or(1), |v| v.dim());
    let mut store = EmbeddingStore::new(embedder.model_name(), dim);
    for (sample, vector) in samples.iter().zip(vectors) {
        store.insert(sample.sample_id.as_str(), vector)?;
    }
    Ok(store)
}

/// A store that records its text settings must match the configured ones.
fn check_store_mode(store: &EmbeddingStore, config: &ExperimentConfig) -> Result<(), HarnessError> {
    let expected = config.prompt.embed_text_mode.as_str();
    if let Some(mode) = store.extra.get("mode").and_then(|v| v.as_str()) {
        if mode.parse::<crate::embedder::EmbedTextMode>().ok() != Some(config.prompt.embed_text_mode) {
            return Err(HarnessError::Config(format!(
                "store was embedded with mode '{mode}' but the run uses '{expected}'"
            )));
        }
    }
    if let Some(tags) = store.extra.get("speaker_tags").and_then(|v| v.as_bool()) {
        if tags != config.embedding.speaker_tags {
            return Err(HarnessError::Config(format!(
                "store speaker_tags={tags} disagrees with embedding.speaker_tags={}",
                config.embedding.speaker_tags
            )));
        }
    }
    Ok(())
}

/// Top-`k` train neighbours of every selected test sample. A test sample that
/// also appears among the candidates never retrieves itself.
pub fn retrieve_all(
    store: &EmbeddingStore,
    inputs: &Inputs,
    k: usize,
    parallelism: usize,
) -> Result<Retrievals, HarnessError> {
    if k == 0 {
        return Ok(inputs.test.iter().map(|s| (s.sample_id.clone(), RetrievalResult::default())).collect());
    }
    let retriever = Retriever::with_ids(store, inputs.train.samples().iter().map(|s| s.sample_id.as_str()))?;
    let pool = thread_pool(parallelism)?;
    pool.install(|| {
        inputs
            .test
            .par_iter()
            .map(|sample| {
                let query = store
                    .get(&sample.sample_id)
                    .ok_or_else(|| crate::retriever::RetrievalError::Missing(sample.sample_id.clone()))?;
                let mut result = retriever.retrieve(query, k + 1)?;
                result.neighbors.retain(|n| n.sample_id != sample.sample_id);
                result.neighbors.truncate(k);
                Ok((sample.sample_id.clone(), result))
            })
            .collect()
    })
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))
}

/// Shared read-only state of the per-sample pipeline.
struct Pipeline<'a> {
    config: &'a ExperimentConfig,
    inputs: &'a Inputs,
    backend: Option<&'a dyn CompletionBackend>,
    counter: &'a TokenCounter,
    dump_dir: Option<PathBuf>,
}

enum Stop {
    Unfittable(String),
    Failed(String),
}

impl From<PromptError> for Stop {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Unfittable { .. } | PromptError::StrictK { .. } => Stop::Unfittable(e.to_string()),
            other => Stop::Failed(other.to_string()),
        }
    }
}

impl Pipeline<'_> {
    fn prompt(
        &self,
        sample: &TurnSample,
        retrieval: &RetrievalResult,
        target: Option<&SlotTarget>,
    ) -> Result<RenderedPrompt, Stop> {
        let prompt = assemble_prompt(
            sample,
            retrieval,
            &self.inputs.train,
            &self.config.prompt,
            &self.inputs.schema,
            target,
            self.counter,
        )?;
        if let Some(dir) = &self.dump_dir {
            let name = match target {
                Some(t) => format!("{}.{}.{}", sample.sample_id, t.domain, t.key),
                None => sample.sample_id.clone(),
            };
            dump_prompt(dir, &name, &prompt.text).map_err(|e| Stop::Failed(e.to_string()))?;
        }
        Ok(prompt)
    }

    /// Every prompt the sample needs, in decoding order.
    fn prompts(
        &self,
        sample: &TurnSample,
        retrieval: &RetrievalResult,
    ) -> Result<Vec<(Option<SlotTarget>, RenderedPrompt)>, Stop> {
        if sample.gold_domains.is_empty() {
            return Ok(Vec::new());
        }
        match self.config.prompt.decoding_strategy {
            DecodingStrategy::SlotValueGivenKey => slot_targets(&sample.gold_domains, &self.inputs.schema)?
                .into_iter()
                .map(|t| self.prompt(sample, retrieval, Some(&t)).map(|p| (Some(t), p)))
                .collect(),
            DecodingStrategy::KeyValueGeneration => Ok(vec![(None, self.prompt(sample, retrieval, None)?)]),
        }
    }

    fn process(&self, sample: &TurnSample, retrieval: &RetrievalResult) -> SampleRecord {
        let demos: Vec<&TurnSample> = retrieval.ids().filter_map(|id| self.inputs.train.get(id)).collect();
        let (_, key_overlap) = relevance_coverage(&demos, sample);
        let mut record = SampleRecord {
            sample_id: sample.sample_id.clone(),
            status: SampleStatus::Ok,
            error: None,
            neighbors: retrieval.neighbors.clone(),
            included_demo_ids: Vec::new(),
            prompt_tokens: 0,
            outputs: Vec::new(),
            prediction: Prediction::default(),
            repair: None,
            key_overlap,
        };
        if let Err(stop) = self.decode(sample, retrieval, &mut record) {
            let (status, message) = match stop {
                Stop::Unfittable(m) => (SampleStatus::Unfittable, m),
                Stop::Failed(m) => (SampleStatus::Failed, m),
            };
            record.status = status;
            record.error = Some(message);
            record.prediction = Prediction::default();
        }
        record
    }

    fn decode(&self, sample: &TurnSample, retrieval: &RetrievalResult, record: &mut SampleRecord) -> Result<(), Stop> {
        let prompts = self.prompts(sample, retrieval)?;
        record.prompt_tokens = prompts.iter().map(|(_, p)| p.estimated_tokens).max().unwrap_or(0);
        record.included_demo_ids = prompts
            .iter()
            .map(|(_, p)| &p.included_demo_ids)
            .min_by_key(|ids| ids.len())
            .cloned()
            .unwrap_or_default();
        let Some(backend) = self.backend else {
            return Ok(());
        };
        let fail = |e: crate::llm::LlmError| Stop::Failed(e.to_string());
        for (target, prompt) in prompts {
            match target {
                Some(target) => {
                    let p = predict_slot_value(&prompt.text, &GenerationParams::slot_value(), backend).map_err(fail)?;
                    record.outputs.push(SlotOutput {
                        slot: Some(format!("{}.{}", target.domain, target.key)),
                        raw: p.raw,
                        latency_ms: p.latency_ms,
                    });
                    if p.value != NOT_MENTIONED {
                        record.prediction.state.insert(&target.domain, &target.key, &p.value);
                    }
                }
                None => {
                    let c = generate_key_values(&prompt.text, &GenerationParams::key_value(), backend).map_err(fail)?;
                    let outcome = repair_and_parse(&c.text);
                    record.prediction = to_state(&outcome, &sample.gold_domains, &self.inputs.schema);
                    record.repair =
                        Some(RepairSummary { status: outcome.status, applied_fixes: outcome.applied_fixes });
                    record.outputs.push(SlotOutput { slot: None, raw: c.text, latency_ms: c.latency_ms });
                }
            }
        }
        Ok(())
    }
}

/// Validates, loads data, embeds and retrieves, then runs.
pub fn run_experiment(config: &ExperimentConfig, options: RunOptions) -> Result<RunReport, HarnessError> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    let store = sample_vectors(config, &inputs)?;
    let retrievals = retrieve_all(&store, &inputs, config.prompt.max_demos, config.parallelism)?;
    run_prepared(config, &inputs, &retrievals, options)
}

/// Identity of a run for resume checks; settings that cannot change results
/// are neutralized.
fn fingerprint(config: &ExperimentConfig) -> Result<String, HarnessError> {
    let mut c = config.clone();
    c.parallelism = 1;
    c.dump_prompts = false;
    c.max_grid_size = 0;
    c.output_dir = PathBuf::new();
    c.grid = GridAxes::default();
    c.to_toml()
}

fn ensure_fingerprint(dir: &Path, config: &ExperimentConfig) -> Result<(), HarnessError> {
    let path = dir.join(CONFIG_FILE);
    let expected = fingerprint(config)?;
    match std::fs::read_to_string(&path) {
        Ok(existing) if existing == expected => Ok(()),
        Ok(_) => Err(HarnessError::Config(format!(
            "{} holds records of a different configuration",
            dir.display()
        ))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            std::fs::write(&path, expected).map_err(HarnessError::io(&path))
        }
        Err(e) => Err(HarnessError::io(&path)(e)),
    }
}

/// Runs with precomputed retrievals (at depth ≥ `max_demos`); records go to
/// `<output_dir>/<config_id>/`.
pub fn run_prepared(
    config: &ExperimentConfig,
    inputs: &Inputs,
    retrievals: &Retrievals,
    options: RunOptions,
) -> Result<RunReport, HarnessError> {
    let dir = config.run_dir();
    std::fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
    ensure_fingerprint(&dir, config)?;
    let backend = config.backend.build().map_err(|e| HarnessError::Config(e.to_string()))?;
    let counter = TokenCounter::from_config(&config.tokens);

    let records_path = dir.join(RECORDS_FILE);
    let (existing, valid_len) = read_records(&records_path)?;
    let selected: HashSet<&str> = inputs.test.iter().map(|s| s.sample_id.as_str()).collect();
    let mut done: BTreeMap<String, SampleRecord> = BTreeMap::new();
    for record in existing {
        if !selected.contains(record.sample_id.as_str()) {
            return Err(HarnessError::Config(format!(
                "{} has a record for '{}', which is not in this run",
                records_path.display(),
                record.sample_id
            )));
        }
        done.insert(record.sample_id.clone(), record);
    }

    let mut pending: Vec<(&TurnSample, RetrievalResult)> = Vec::new();
    for sample in inputs.test.iter().filter(|s| !done.contains_key(&s.sample_id)) {
        let retrieval = retrievals
            .get(&sample.sample_id)
            .ok_or_else(|| HarnessError::Config(format!("no retrieval for '{}'", sample.sample_id)))?;
        pending.push((sample, retrieval.top(config.prompt.max_demos)));
    }
    if let Some(limit) = options.max_new_samples {
        pending.truncate(limit);
    }

    let pipeline = Pipeline {
        config,
        inputs,
        backend: Some(backend.as_ref()),
        counter: &counter,
        dump_dir: config.dump_prompts.then(|| dir.join("prompts")),
    };
    let pool = thread_pool(config.parallelism)?;
    let mut writer = RecordWriter::open(&records_path, valid_len)?;
    let (mut new_samples, mut backend_calls) = (0, 0);
    for chunk in pending.chunks(config.parallelism * 8) {
        let records: Vec<SampleRecord> =
            pool.install(|| chunk.par_iter().map(|(s, r)| pipeline.process(s, r)).collect());
        writer.append(&records)?;
        new_samples += records.len();
        backend_calls += records.iter().map(|r| r.outputs.len()).sum::<usize>();
        done.extend(records.into_iter().map(|r| (r.sample_id.clone(), r)));
    }
    drop(writer);

    let mut report = summarize(config.config_id(), inputs, &done)?;
    report.new_samples = new_samples;
    report.backend_calls = backend_calls;
    let metrics_path = dir.join(METRICS_FILE);
    if report.complete {
        let text = serde_json::to_string_pretty(&report).expect("reports serialize") + "\n";
        std::fs::write(&metrics_path, text).map_err(HarnessError::io(&metrics_path))?;
    }
    Ok(report)
}

fn summarize(
    config_id: String,
    inputs: &Inputs,
    done: &BTreeMap<String, SampleRecord>,
) -> Result<RunReport, HarnessError> {
    let mut predictions = BTreeMap::new();
    let mut golds: BTreeMap<String, DialogueState> = BTreeMap::new();
    let mut overlaps: Vec<KeyOverlap> = Vec::new();
    let mut report = RunReport {
        config_id,
        complete: done.len() == inputs.test.len(),
        samples: done.len(),
        succeeded: 0,
        failed: 0,
        unfittable: 0,
        metrics: Metrics::default(),
        relevance_coverage: None,
        repair_status: BTreeMap::new(),
        repair_fixes: BTreeMap::new(),
        new_samples: 0,
        backend_calls: 0,
    };
    for sample in &inputs.test {
        let Some(record) = done.get(&sample.sample_id) else { continue };
        match record.status {
            SampleStatus::Ok => report.succeeded += 1,
            SampleStatus::Failed => report.failed += 1,
            SampleStatus::Unfittable => report.unfittable += 1,
        }
        if let Some(repair) = &record.repair {
            let status = serde_json::to_value(repair.status).expect("enum serializes");
            *report.repair_status.entry(status.as_str().unwrap_or_default().to_string()).or_default() += 1;
            for fix in &repair.applied_fixes {
                *report.repair_fixes.entry(fix.as_str().to_string()).or_default() += 1;
            }
        }
        predictions.insert(sample.sample_id.clone(), record.prediction.clone());
        golds.insert(sample.sample_id.clone(), sample.gold_state.clone());
        overlaps.push(record.key_overlap);
    }
    report.metrics = micro_metrics(&predictions, &golds)?;
    report.relevance_coverage = aggregate_relevance_coverage(&overlaps).ok();
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DryRunReport {
    pub samples: usize,
    pub prompts: usize,
    pub unfittable: usize,
    pub failed: usize,
    pub prompt_dir: PathBuf,
}

/// Renders and writes every prompt without calling the backend.
pub fn dry_run(config: &ExperimentConfig) -> Result<DryRunReport, HarnessError> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    let store = sample_vectors(config, &inputs)?;
    let retrievals = retrieve_all(&store, &inputs, config.prompt.max_demos, config.parallelism)?;
    let counter = TokenCounter::from_config(&config.tokens);
    let prompt_dir = config.run_dir().join("prompts");
    let pipeline = Pipeline {
        config,
        inputs: &inputs,
        backend: None,
        counter: &counter,
        dump_dir: Some(prompt_dir.clone()),
    };
    let mut report = DryRunReport { prompt_dir, ..DryRunReport::default() };
    for sample in &inputs.test {
        report.samples += 1;
        match pipeline.prompts(sample, &retrievals[&sample.sample_id]) {
            Ok(prompts) => report.prompts += prompts.len(),
            Err(Stop::Unfittable(_)) => report.unfittable += 1,
            Err(Stop::Failed(_)) => report.failed += 1,
        }
    }
    Ok(report)
}
