//! Completion backends and the two decoding strategies.
//!
//! `HttpCompletionBackend` talks to any OpenAI-compatible `/v1/completions`
//! endpoint. `MockCopyBackend` answers by copying slot values from the most
//! similar demonstration in the prompt, which makes whole runs deterministic
//! and checkable offline.

use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{normalize_value, NOT_MENTIONED};
use crate::http::{self, HttpError, RetryPolicy};
use crate::prompt::{DOMAIN_MARKER, SLOTS_MARKER};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("backend failure: {0}")]
    Backend(String),
    /// The server rejected the prompt as too long for its context.
    #[error("prompt does not fit the model context: {0}")]
    ContextOverflow(String),
    #[error("mock backend cannot parse prompt: {0}")]
    Mock(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("prompt does not end as the decoding strategy requires: {0}")]
    PromptShape(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
}

impl GenerationParams {
    pub fn slot_value() -> Self {
        Self { max_new_tokens: 32, temperature: 0.0, stop_sequences: vec!["\"".into()] }
    }

    pub fn key_value() -> Self {
        Self {
            max_new_tokens: 256,
            temperature: 0.0,
            stop_sequences: vec!["\nUser:".into(), "\nInstruction:".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpCompletion,
    MockCopyFromTopDemo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmBackendDescriptor {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Seconds before the first retry; doubles on each further retry.
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
    /// Environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

fn default_model() -> String {
    "mock".into()
}

fn default_timeout() -> f64 {
    120.0
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> f64 {
    0.5
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

impl LlmBackendDescriptor {
    pub fn mock() -> Self {
        Self {
            kind: BackendKind::MockCopyFromTopDemo,
            endpoint_url: None,
            model_name: default_model(),
            request_timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_secs: default_backoff(),
            api_key_env: default_key_env(),
        }
    }

    pub fn http(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpCompletion,
            endpoint_url: Some(endpoint_url.into()),
            model_name: model_name.into(),
            ..Self::mock()
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.kind == BackendKind::HttpCompletion && self.endpoint_url.is_none() {
            return Err(LlmError::Config("http_completion backend needs endpoint_url".into()));
        }
        if self.request_timeout_secs.is_nan() || self.request_timeout_secs <= 0.0 {
            return Err(LlmError::Config("request_timeout_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn CompletionBackend>, LlmError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::MockCopyFromTopDemo => Box::new(MockCopyBackend),
            BackendKind::HttpCompletion => Box::new(HttpCompletionBackend::new(self)?),
        })
    }
}

/// Raw continuation plus the time spent waiting on the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Wall-clock milliseconds of the network call; 0 for in-process backends.
    pub latency_ms: u64,
}

pub trait CompletionBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Continuation of `prompt`. Stop-sequence truncation is applied by
    /// [`complete`], so implementations may return text past a stop.
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, LlmError>;
}

/// Cuts `text` at the earliest stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

pub fn complete(
    prompt: &str,
    params: &GenerationParams,
    backend: &dyn CompletionBackend,
) -> Result<Completion, LlmError> {
    if prompt.is_empty() {
        return Err(LlmError::EmptyPrompt);
    }
    let mut completion = backend.generate(prompt, params)?;
    let cut = truncate_at_stop(&completion.text, &params.stop_sequences).len();
    completion.text.truncate(cut);
    Ok(completion)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotPrediction {
    pub value: String,
    pub raw: String,
    pub latency_ms: u64,
}

/// Decodes one slot value. The prompt must end inside an opened value quote.
pub fn predict_slot_value(
    prompt: &str,
    params: &GenerationParams,
    backend: &dyn CompletionBackend,
) -> Result<SlotPrediction, LlmError> {
    if !prompt.ends_with(": \"") {
        return Err(LlmError::PromptShape("expected an opened value quote".into()));
    }
    let mut params = params.clone();
    if !params.stop_sequences.iter().any(|s| s == "\"") {
        params.stop_sequences.push("\"".into());
    }
    let completion = complete(prompt, &params, backend)?;
    let value = normalize_value(&completion.text);
    Ok(SlotPrediction {
        value: if value.is_empty() { NOT_MENTIONED.into() } else { value },
        raw: completion.text,
        latency_ms: completion.latency_ms,
    })
}

/// Generates a whole slots object; the raw text goes to the repair step.
pub fn generate_key_values(
    prompt: &str,
    params: &GenerationParams,
    backend: &dyn CompletionBackend,
) -> Result<Completion, LlmError> {
    if !prompt.ends_with(SLOTS_MARKER) {
        return Err(LlmError::PromptShape("expected the prompt to end with 'Slots: '".into()));
    }
    complete(prompt, params, backend)
}

pub struct HttpCompletionBackend {
    url: String,
    model: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    api_key: Option<String>,
}

impl HttpCompletionBackend {
    pub fn new(descriptor: &LlmBackendDescriptor) -> Result<Self, LlmError> {
        let url = descriptor
            .endpoint_url
            .clone()
            .ok_or_else(|| LlmError::Config("missing endpoint_url".into()))?;
        Ok(Self {
            url,
            model: descriptor.model_name.clone(),
            client: http::client(Duration::from_secs_f64(descriptor.request_timeout_secs)),
            retry: RetryPolicy {
                max_retries: descriptor.max_retries,
                base_delay_secs: descriptor.backoff_base_secs,
                factor: 2.0,
            },
            api_key: std::env::var(&descriptor.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }
}

fn is_context_overflow(body: &str) -> bool {
    let lower = body.to_lowercase();
    lower.contains("context length")
        || lower.contains("context window")
        || lower.contains("maximum context")
        || (lower.contains("context") && lower.contains("too long"))
}

impl CompletionBackend for HttpCompletionBackend {
    fn name(&self) -> &str {
        &self.model
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, LlmError> {
        let body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "stop": params.stop_sequences,
        });
        log::debug!(
            "POST {} model={} prompt={:?}",
            self.url,
            self.model,
            http::elide(prompt, 500)
        );
        let started = Instant::now();
        let response = http::post_json(&self.client, &self.url, &body, self.api_key.as_deref(), &self.retry)
            .map_err(|e| match e {
                HttpError::Status { status: 400 | 413, ref body } if is_context_overflow(body) => {
                    LlmError::ContextOverflow(e.to_string())
                }
                other => LlmError::Backend(other.to_string()),
            })?;
        let latency_ms = started.elapsed().as_millis() as u64;
        log::debug!("response: {}", http::elide(&response.to_string(), 500));
        let text = response
            .pointer("/choices/0/text")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::Backend("response has no choices[0].text".into()))?;
        Ok(Completion { text: text.to_string(), latency_ms })
    }
}

/// Copies the answer from the demonstration closest to the test block.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockCopyBackend;

impl CompletionBackend for MockCopyBackend {
    fn name(&self) -> &str {
        "mock_copy_from_top_demo"
    }

    fn generate(&self, prompt: &str, _params: &GenerationParams) -> Result<Completion, LlmError> {
        Ok(Completion { text: mock_copy_from_top_demo(prompt)?, latency_ms: 0 })
    }
}

struct Block<'a> {
    domains: Vec<String>,
    slots: &'a str,
}

/// Splits `<history> Domain: [...] Slots: <rest>` at its last domain marker.
fn parse_block(line: &str) -> Result<Block<'_>, LlmError> {
    let marker = format!("{DOMAIN_MARKER}[");
    let start = line
        .rfind(&marker)
        .ok_or_else(|| LlmError::Mock("block has no domain list".into()))?
        + DOMAIN_MARKER.len();
    let after = &line[start..];
    let mut stream = serde_json::Deserializer::from_str(after).into_iter::<Vec<String>>();
    let domains = match stream.next() {
        Some(Ok(domains)) => domains,
        _ => return Err(LlmError::Mock("unreadable domain list".into())),
    };
    let rest = &after[stream.byte_offset()..];
    let slots = rest
        .strip_prefix(SLOTS_MARKER)
        .ok_or_else(|| LlmError::Mock("domain list not followed by slots".into()))?;
    Ok(Block { domains, slots })
}

/// Demo slots as domain → (key → value).
fn demo_slots(block: &Block<'_>) -> Result<IndexMap<String, IndexMap<String, Value>>, LlmError> {
    let object: IndexMap<String, Value> = serde_json::from_str(block.slots)
        .map_err(|e| LlmError::Mock(format!("demonstration slots: {e}")))?;
    let nested = !object.is_empty()
        && object.iter().all(|(k, v)| v.is_object() && block.domains.contains(k));
    if nested {
        return Ok(object
            .into_iter()
            .map(|(d, v)| {
                let inner = v.as_object().cloned().unwrap_or_default().into_iter().collect();
                (d, inner)
            })
            .collect());
    }
    let mut out = IndexMap::new();
    if let Some(domain) = block.domains.first() {
        out.insert(domain.clone(), object);
    }
    Ok(out)
}

/// `{"k": "v", ...}` with the spacing the prompt uses.
fn spaced_object<'a>(pairs: impl Iterator<Item = (&'a String, String)>) -> String {
    let items: Vec<String> = pairs
        .map(|(k, v)| format!("{}: {}", serde_json::to_string(k).expect("string"), v))
        .collect();
    format!("{{{}}}", items.join(", "))
}

fn spaced_json(value: &Value) -> String {
    match value {
        Value::Object(map) => spaced_object(map.iter().map(|(k, v)| (k, spaced_json(v)))),
        other => other.to_string(),
    }
}

/// Target slot opened by a slot-value test block: `{"key": "` or
/// `{"domain": {"key": "`.
fn parse_target(suffix: &str, test_domains: &[String]) -> Result<(String, String), LlmError> {
    let bad = || LlmError::Mock(format!("unrecognized slot prefix {suffix:?}"));
    let body = suffix.strip_prefix('{').ok_or_else(bad)?;
    let mut stream = serde_json::Deserializer::from_str(body).into_iter::<String>();
    let first = stream.next().and_then(Result::ok).ok_or_else(bad)?;
    let rest = body[stream.byte_offset()..].strip_prefix(": ").ok_or_else(bad)?;
    if rest == "\"" {
        let [domain] = test_domains else {
            return Err(LlmError::Mock("flat slot prefix needs exactly one test domain".into()));
        };
        return Ok((domain.clone(), first));
    }
    let inner = rest.strip_prefix('{').ok_or_else(bad)?;
    let mut stream = serde_json::Deserializer::from_str(inner).into_iter::<String>();
    let key = stream.next().and_then(Result::ok).ok_or_else(bad)?;
    if &inner[stream.byte_offset()..] != ": \"" {
        return Err(bad());
    }
    Ok((first, key))
}

/// Deterministic stand-in for an LLM.
///
/// For a slot-value prompt, returns the last (most similar) demonstration's
/// value for the opened slot followed by a closing quote, or
/// `not mentioned"` when the demonstration lacks it. For a key-value prompt,
/// returns the demonstration's slots restricted to the test block's domains
/// (flat when the test lists one domain).
pub fn mock_copy_from_top_demo(prompt: &str) -> Result<String, LlmError> {
    let lines: Vec<&str> = prompt.split('\n').collect();
    if lines.len() < 3 {
        return Err(LlmError::Mock("prompt has no demonstration".into()));
    }
    let test = parse_block(lines[lines.len() - 1])?;
    let demo = parse_block(lines[lines.len() - 2])?;
    let slots = demo_slots(&demo)?;

    if test.slots.is_empty() {
        if let [domain] = test.domains.as_slice() {
            let object = slots.get(domain).map_or_else(
                || "{}".to_string(),
                |kv| spaced_object(kv.iter().map(|(k, v)| (k, spaced_json(v)))),
            );
            return Ok(object);
        }
        let parts = test.domains.iter().filter_map(|d| {
            slots.get(d).map(|kv| (d, spaced_object(kv.iter().map(|(k, v)| (k, spaced_json(v))))))
        });
        return Ok(spaced_object(parts));
    }

    let (domain, key) = parse_target(test.slots, &test.domains)?;
    let value = slots
        .get(&domain)
        .and_then(|kv| kv.get(&key))
        .map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
        .unwrap_or_else(|| NOT_MENTIONED.to_string());
    Ok(format!("{value}\""))
}

#[cfg(test)]
mod tests {
    use super::*;

    const WORKED_DEMO: &str = r#"User: Can you help me get a taxi to Pizza Hut Fen Ditton? Agent: Sure. Where do you want to depart from? User: I want to depart from Sidney, Sussex College, also I need a reservation there. Domain: ["taxi", "restaurant"] Slots: {"taxi": {"arriveBy": "not mentioned", "departure": "sidney sussex college", "destination": "pizza hut fenditton", "leaveAt": "not mentioned"}, "restaurant": {"area": "centre", "day": "not mentioned", "food": "not mentioned", "name": "not mentioned", "people": "not mentioned", "pricerange": "expensive", "time": "not mentioned"}}"#;

    fn prompt(test_suffix: &str, domains: &str) -> String {
        format!(
            "Instruction: Identify the slot value.\n{WORKED_DEMO}\nUser: I would like a taxi from Saint John's College to Pizza Hut Fen Ditton. Domain: {domains} Slots: {test_suffix}"
        )
    }

    struct Scripted(Vec<&'static str>, std::sync::Mutex<usize>);

    impl CompletionBackend for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }

        fn generate(&self, _: &str, _: &GenerationParams) -> Result<Completion, LlmError> {
            let mut i = self.1.lock().unwrap();
            let text = self.0[*i % self.0.len()].to_string();
            *i += 1;
            Ok(Completion { text, latency_ms: 0 })
        }
    }

    fn scripted(text: &'static str) -> Scripted {
        Scripted(vec![text], std::sync::Mutex::new(0))
    }

    #[test]
    fn mock_copies_target_value() {
        let out = mock_copy_from_top_demo(&prompt(r#"{"destination": ""#, r#"["taxi"]"#)).unwrap();
        assert_eq!(out, "pizza hut fenditton\"");
        let out = mock_copy_from_top_demo(&prompt(r#"{"restaurant": {"area": ""#, r#"["taxi", "restaurant"]"#)).unwrap();
        assert_eq!(out, "centre\"");
    }

    #[test]
    fn mock_absent_target() {
        let out = mock_copy_from_top_demo(&prompt(r#"{"stars": ""#, r#"["hotel"]"#)).unwrap();
        assert_eq!(out, "not mentioned\"");
    }

    #[test]
    fn mock_key_value_restricts_to_test_domains() {
        let out = mock_copy_from_top_demo(&prompt("", r#"["taxi"]"#)).unwrap();
        assert_eq!(
            out,
            r#"{"arriveBy": "not mentioned", "departure": "sidney sussex college", "destination": "pizza hut fenditton", "leaveAt": "not mentioned"}"#
        );
        let both = mock_copy_from_top_demo(&prompt("", r#"["restaurant", "hotel"]"#)).unwrap();
        assert!(both.starts_with(r#"{"restaurant": {"area": "centre""#), "{both}");
        assert!(!both.contains("hotel"));
    }

    #[test]
    fn mock_rejects_unparseable_prompts() {
        assert!(matches!(mock_copy_from_top_demo("just text"), Err(LlmError::Mock(_))));
        assert!(matches!(mock_copy_from_top_demo("a\nb\nc"), Err(LlmError::Mock(_))));
    }

    #[test]
    fn stop_sequences_truncate() {
        let backend = scripted("centre\" , \"day\": \"monday\"}");
        let out = complete("p", &GenerationParams::slot_value(), &backend).unwrap();
        assert_eq!(out.text, "centre");
        assert_eq!(truncate_at_stop("a\nUser: b", &GenerationParams::key_value().stop_sequences), "a");
    }

    #[test]
    fn mock_is_deterministic() {
        let p = prompt(r#"{"departure": ""#, r#"["taxi"]"#);
        let a = complete(&p, &GenerationParams::slot_value(), &MockCopyBackend).unwrap();
        let b = complete(&p, &GenerationParams::slot_value(), &MockCopyBackend).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text, "sidney sussex college");
    }

    #[test]
    fn slot_value_post_processing() {
        let p = prompt(r#"{"departure": ""#, r#"["taxi"]"#);
        let params = GenerationParams::slot_value();
        assert_eq!(predict_slot_value(&p, &params, &scripted("not mentioned\"")).unwrap().value, NOT_MENTIONED);
        assert_eq!(predict_slot_value(&p, &params, &scripted("\"")).unwrap().value, NOT_MENTIONED);
        assert_eq!(predict_slot_value(&p, &params, &scripted("  Centre  \"")).unwrap().value, "centre");
        let no_quote_stop = GenerationParams { stop_sequences: vec![], ..params };
        let v = predict_slot_value(&p, &no_quote_stop, &scripted("a\"b")).unwrap();
        assert!(!v.value.contains('"'));
        assert!(predict_slot_value("no quote", &GenerationParams::slot_value(), &MockCopyBackend).is_err());
    }

    #[test]
    fn key_value_output_passes_through() {
        let p = prompt("", r#"["taxi"]"#);
        let raw = r#"{"leaveAt": "17:00"} Hope this helps!"#;
        let out = generate_key_values(&p, &GenerationParams::key_value(), &scripted(raw)).unwrap();
        assert_eq!(out.text, raw);
    }

    #[test]
    fn descriptor_validation() {
        let mut d = LlmBackendDescriptor::http("http://localhost:1/v1/completions", "m");
        assert!(d.validate().is_ok());
        d.endpoint_url = None;
        assert!(d.validate().is_err());
        assert!(LlmBackendDescriptor::mock().build().is_ok());
    }

    #[test]
    fn overflow_detection() {
        assert!(is_context_overflow(
            "This model's maximum context length is 2048 tokens. However, you requested 2100 tokens"
        ));
        assert!(!is_context_overflow("invalid temperature"));
    }
}
