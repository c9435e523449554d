//! Prompt construction.
//!
//! Layout of an assembled prompt, one block per line:
//!
//! ```text
//! Instruction: Identify the slot value.
//! <history> Domain: ["taxi", "restaurant"] Slots: {"taxi": {...}, "restaurant": {...}}   (least similar demo)
//! ...
//! <history> Domain: ["taxi"] Slots: {"arriveBy": "not mentioned", ...}                  (most similar demo)
//! <history> Domain: ["taxi"] Slots: {"arriveBy": "                                        (test block)
//! ```
//!
//! A slots object is flat when it covers exactly one domain and nested by
//! domain otherwise. Every schema key of a listed domain is rendered, absent
//! values as `"not mentioned"`.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Corpus, DialogueState, HistoryMode, Schema, TurnSample, NOT_MENTIONED};
use crate::embedder::EmbedTextMode;
use crate::http::{self, RetryPolicy};
use crate::retriever::RetrievalResult;

pub const DEFAULT_INSTRUCTION: &str = "Instruction: Identify the slot value.";
pub const DOMAIN_MARKER: &str = " Domain: ";
pub const SLOTS_MARKER: &str = " Slots: ";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptError {
    #[error("domain '{0}' is not in the schema")]
    UnknownDomain(String),
    #[error("slot key '{domain}.{key}' is not in the schema")]
    UnknownKey { domain: String, key: String },
    #[error("slot-value decoding needs a target slot")]
    MissingTarget,
    #[error("demonstration '{0}' is not in the training corpus")]
    MissingDemo(String),
    #[error("retrieval result is not ranked by descending score")]
    NotRanked,
    #[error("test block alone needs {tokens} tokens, limit is {limit}")]
    Unfittable { tokens: usize, limit: usize },
    #[error("only {fitted} of {requested} demonstrations fit the token budget")]
    StrictK { requested: usize, fitted: usize },
    #[error("invalid prompt configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingStrategy {
    /// One completion per (domain, slot key), prompted up to the value quote.
    SlotValueGivenKey,
    /// One completion producing the whole slots object.
    KeyValueGeneration,
}

impl DecodingStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodingStrategy::SlotValueGivenKey => "slot_value_given_key",
            DecodingStrategy::KeyValueGeneration => "key_value_generation",
        }
    }
}

impl std::str::FromStr for DecodingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slot_value_given_key" | "slot" => Ok(DecodingStrategy::SlotValueGivenKey),
            "key_value_generation" | "kv" => Ok(DecodingStrategy::KeyValueGeneration),
            other => Err(format!("unknown decoding strategy '{other}'")),
        }
    }
}

/// Flat-vs-nested choice for slots objects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotsLayout {
    /// Flat for one domain, nested for several.
    #[default]
    Auto,
    Flat,
    Nested,
}

impl SlotsLayout {
    fn nested(self, domain_count: usize) -> bool {
        match self {
            SlotsLayout::Auto => domain_count != 1,
            SlotsLayout::Flat => domain_count > 1,
            SlotsLayout::Nested => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub instruction: String,
    pub history_mode: HistoryMode,
    pub speaker_tags: bool,
    pub max_demos: usize,
    pub token_budget: usize,
    /// Tokens held back for the answer.
    pub generation_reserve: usize,
    pub embed_text_mode: EmbedTextMode,
    pub decoding_strategy: DecodingStrategy,
    pub slots_layout: SlotsLayout,
    /// Fail instead of dropping demonstrations that do not fit.
    pub strict_k: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.into(),
            history_mode: HistoryMode::UserAgent,
            speaker_tags: true,
            max_demos: 10,
            token_budget: 2048,
            generation_reserve: 64,
            embed_text_mode: EmbedTextMode::UserAgent,
            decoding_strategy: DecodingStrategy::SlotValueGivenKey,
            slots_layout: SlotsLayout::Auto,
            strict_k: false,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.token_budget == 0 {
            return Err(PromptError::Config("token_budget must be positive".into()));
        }
        if self.generation_reserve == 0 || self.generation_reserve >= self.token_budget {
            return Err(PromptError::Config(format!(
                "generation_reserve ({}) must be positive and below token_budget ({})",
                self.generation_reserve, self.token_budget
            )));
        }
        if self.instruction.contains('\n') {
            return Err(PromptError::Config("instruction must be a single line".into()));
        }
        Ok(())
    }

    /// Tokens available to the prompt text.
    pub fn prompt_limit(&self) -> usize {
        self.token_budget.saturating_sub(self.generation_reserve)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotTarget {
    pub domain: String,
    pub key: String,
}

impl SlotTarget {
    pub fn new(domain: impl Into<String>, key: impl Into<String>) -> Self {
        Self { domain: domain.into(), key: key.into() }
    }
}

/// Every (domain, key) pair to decode for the given domains, schema order.
pub fn slot_targets(domains: &[String], schema: &Schema) -> Result<Vec<SlotTarget>, PromptError> {
    let mut targets = Vec::new();
    for domain in domains {
        let keys = schema.keys(domain).ok_or_else(|| PromptError::UnknownDomain(domain.clone()))?;
        targets.extend(keys.iter().map(|k| SlotTarget::new(domain.as_str(), k.as_str())));
    }
    Ok(targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub sample_id: String,
    pub score: f64,
    pub rendered_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Prompt order: least similar first.
    pub included_demo_ids: Vec<String>,
    pub estimated_tokens: usize,
    pub test_sample_id: String,
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// `["taxi", "restaurant"]`
pub fn render_domain_list(domains: &[String]) -> String {
    let items: Vec<String> = domains.iter().map(|d| quote(d)).collect();
    format!("[{}]", items.join(", "))
}

fn render_domain_object(state: &DialogueState, domain: &str, schema: &Schema) -> Result<String, PromptError> {
    let keys = schema.keys(domain).ok_or_else(|| PromptError::UnknownDomain(domain.into()))?;
    if let Some(values) = state.domain(domain) {
        if let Some(key) = values.keys().find(|k| !keys.contains(k)) {
            return Err(PromptError::UnknownKey { domain: domain.into(), key: key.clone() });
        }
    }
    let pairs: Vec<String> = keys
        .iter()
        .map(|key| {
            let value = state.get(domain, key).unwrap_or(NOT_MENTIONED);
            format!("{}: {}", quote(key), quote(value))
        })
        .collect();
    Ok(format!("{{{}}}", pairs.join(", ")))
}

/// Single-line slots object over the listed domains. An empty domain list
/// renders as `{}`.
pub fn render_state_json(
    state: &DialogueState,
    domains: &[String],
    schema: &Schema,
) -> Result<String, PromptError> {
    render_state_json_with(state, domains, schema, SlotsLayout::Auto)
}

pub fn render_state_json_with(
    state: &DialogueState,
    domains: &[String],
    schema: &Schema,
    layout: SlotsLayout,
) -> Result<String, PromptError> {
    if domains.is_empty() {
        return Ok("{}".into());
    }
    if !layout.nested(domains.len()) {
        return render_domain_object(state, &domains[0], schema);
    }
    let parts = domains
        .iter()
        .map(|d| Ok(format!("{}: {}", quote(d), render_domain_object(state, d, schema)?)))
        .collect::<Result<Vec<_>, PromptError>>()?;
    Ok(format!("{{{}}}", parts.join(", ")))
}

fn block_head(sample: &TurnSample, config: &PromptConfig) -> String {
    format!(
        "{}{}{}{}",
        sample.render_history(config.history_mode, config.speaker_tags),
        DOMAIN_MARKER,
        render_domain_list(&sample.gold_domains),
        SLOTS_MARKER
    )
}

pub fn render_demonstration(
    sample: &TurnSample,
    score: f64,
    config: &PromptConfig,
    schema: &Schema,
) -> Result<Demonstration, PromptError> {
    let slots = render_state_json_with(&sample.gold_state, &sample.gold_domains, schema, config.slots_layout)?;
    Ok(Demonstration {
        sample_id: sample.sample_id.clone(),
        score,
        rendered_text: block_head(sample, config) + &slots,
    })
}

/// History and gold domain list of the test sample, followed by the opened
/// JSON path of `target` (slot-value decoding) or nothing (key-value
/// generation).
pub fn render_test_block(
    sample: &TurnSample,
    config: &PromptConfig,
    schema: &Schema,
    target: Option<&SlotTarget>,
) -> Result<String, PromptError> {
    for domain in &sample.gold_domains {
        if !schema.has_domain(domain) {
            return Err(PromptError::UnknownDomain(domain.clone()));
        }
    }
    let mut text = block_head(sample, config);
    match config.decoding_strategy {
        DecodingStrategy::KeyValueGeneration => {}
        DecodingStrategy::SlotValueGivenKey => {
            let target = target.ok_or(PromptError::MissingTarget)?;
            if !schema.has_domain(&target.domain) {
                return Err(PromptError::UnknownDomain(target.domain.clone()));
            }
            if !schema.has_key(&target.domain, &target.key) {
                return Err(PromptError::UnknownKey {
                    domain: target.domain.clone(),
                    key: target.key.clone(),
                });
            }
            let domain_count = sample.gold_domains.len().max(1);
            if config.slots_layout.nested(domain_count) {
                text.push_str(&format!("{{{}: {{{}: \"", quote(&target.domain), quote(&target.key)));
            } else {
                text.push_str(&format!("{{{}: \"", quote(&target.key)));
            }
        }
    }
    Ok(text)
}

fn join_prompt(instruction: &str, demos: &[Demonstration], test_block: &str) -> String {
    let mut text = String::with_capacity(
        instruction.len() + test_block.len() + demos.iter().map(|d| d.rendered_text.len() + 1).sum::<usize>() + 1,
    );
    text.push_str(instruction);
    text.push('\n');
    for demo in demos {
        text.push_str(&demo.rendered_text);
        text.push('\n');
    }
    text.push_str(test_block);
    text
}

/// Builds the full prompt for one test sample (and target slot).
///
/// Takes the top `max_demos` neighbours, places them least similar first so
/// the most similar one sits right before the test block, then drops the
/// least similar remaining demonstration until the estimate fits
/// `token_budget - generation_reserve`.
pub fn assemble_prompt(
    test: &TurnSample,
    retrieval: &RetrievalResult,
    corpus: &Corpus,
    config: &PromptConfig,
    schema: &Schema,
    target: Option<&SlotTarget>,
    counter: &TokenCounter,
) -> Result<RenderedPrompt, PromptError> {
    config.validate()?;
    if retrieval.neighbors.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(PromptError::NotRanked);
    }
    let mut demos = retrieval
        .neighbors
        .iter()
        .take(config.max_demos)
        .map(|n| {
            let sample = corpus.get(&n.sample_id).ok_or_else(|| PromptError::MissingDemo(n.sample_id.clone()))?;
            render_demonstration(sample, n.score, config, schema)
        })
        .collect::<Result<Vec<_>, _>>()?;
    demos.reverse();
    let requested = demos.len();

    let test_block = render_test_block(test, config, schema, target)?;
    let limit = config.prompt_limit();
    let mut start = 0;
    loop {
        let text = join_prompt(&config.instruction, &demos[start..], &test_block);
        let tokens = counter.estimate(&text);
        if tokens <= limit {
            return Ok(RenderedPrompt {
                text,
                included_demo_ids: demos[start..].iter().map(|d| d.sample_id.clone()).collect(),
                estimated_tokens: tokens,
                test_sample_id: test.sample_id.clone(),
            });
        }
        if start == demos.len() {
            return Err(PromptError::Unfittable { tokens, limit });
        }
        if config.strict_k {
            let fitted = (start..=demos.len())
                .find(|&s| counter.estimate(&join_prompt(&config.instruction, &demos[s..], &test_block)) <= limit)
                .map_or(0, |s| demos.len() - s);
            return Err(PromptError::StrictK { requested, fitted });
        }
        start += 1;
    }
}

/// `ceil(utf8_len / 4)`
pub fn heuristic_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Where token counts come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenCounterConfig {
    #[default]
    Heuristic,
    /// A tokenize endpoint answering `{"count": n}` or `{"tokens": [...]}`.
    Endpoint { url: String, model: String },
}

pub struct TokenCounter {
    endpoint: Option<(String, String, reqwest::blocking::Client)>,
}

impl TokenCounter {
    pub fn heuristic() -> Self {
        Self { endpoint: None }
    }

    pub fn from_config(config: &TokenCounterConfig) -> Self {
        match config {
            TokenCounterConfig::Heuristic => Self::heuristic(),
            TokenCounterConfig::Endpoint { url, model } => Self {
                endpoint: Some((url.clone(), model.clone(), http::client(Duration::from_secs(30)))),
            },
        }
    }

    pub fn estimate(&self, text: &str) -> usize {
        let Some((url, model, client)) = &self.endpoint else {
            return heuristic_tokens(text);
        };
        let body = json!({"model": model, "prompt": text, "content": text});
        let policy = RetryPolicy { max_retries: 1, ..RetryPolicy::default() };
        let counted = http::post_json(client, url, &body, None, &policy).ok().and_then(|v| {
            v.get("count")
                .and_then(Value::as_u64)
                .map(|c| c as usize)
                .or_else(|| v.get("tokens").and_then(Value::as_array).map(Vec::len))
        });
        counted.unwrap_or_else(|| {
            log::warn!("tokenize endpoint {url} failed; using the byte heuristic");
            heuristic_tokens(text)
        })
    }
}

impl Default for TokenCounter {
    fn default() -> Self {
        Self::heuristic()
    }
}

/// Token estimate under the given counter.
pub fn estimate_tokens(text: &str, counter: &TokenCounter) -> usize {
    counter.estimate(text)
}

/// Writes `<dir>/<sample_id>.prompt.txt`.
pub fn dump_prompt(dir: &Path, sample_id: &str, text: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let name: String = sample_id
        .chars()
        .map(|c| if matches!(c, '/' | '\\') { '_' } else { c })
        .collect();
    std::fs::write(dir.join(format!("{name}.prompt.txt")), text)
}
