//! Blocking JSON-over-HTTP with retry and exponential backoff, shared by the
//! embedding-service and completion backends.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry, in seconds.
    pub base_delay_secs: f64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay_secs: 0.5, factor: 2.0 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        Duration::from_secs_f64(self.base_delay_secs * self.factor.powi(attempt as i32))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("invalid response body: {0}")]
    Decode(String),
}

impl HttpError {
    /// Timeouts, connection failures, 429 and 5xx are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            HttpError::Status { status, .. } => *status == 429 || *status >= 500,
            HttpError::Transport(_) => true,
            HttpError::Decode(_) => false,
        }
    }
}

pub fn client(timeout: Duration) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .expect("HTTP client builds")
}

/// Truncates long strings for debug logging.
pub(crate) fn elide(text: &str, limit: usize) -> String {
    if text.len() <= limit {
        return text.to_string();
    }
    let mut cut = limit;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}…[{} bytes elided]", &text[..cut], text.len() - cut)
}

fn post_once(
    client: &reqwest::blocking::Client,
    url: &str,
    body: &Value,
    api_key: Option<&str>,
) -> Result<Value, HttpError> {
    let mut request = client.post(url).json(body);
    if let Some(key) = api_key {
        request = request.bearer_auth(key);
    }
    let response = request.send().map_err(|e| HttpError::Transport(e.to_string()))?;
    let status = response.status();
    let text = response.text().map_err(|e| HttpError::Transport(e.to_string()))?;
    if !status.is_success() {
        return Err(HttpError::Status { status: status.as_u16(), body: text });
    }
    serde_json::from_str(&text).map_err(|e| HttpError::Decode(format!("{e}: {}", elide(&text, 200))))
}

/// POSTs `body` and decodes the JSON response, retrying retryable failures.
pub fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    body: &Value,
    api_key: Option<&str>,
    policy: &RetryPolicy,
) -> Result<Value, HttpError> {
    let mut attempt = 0;
    loop {
        match post_once(client, url, body, api_key) {
            Ok(value) => return Ok(value),
            Err(err) if err.is_retryable() && attempt < policy.max_retries => {
                let delay = policy.delay(attempt);
                log::debug!("POST {url} failed ({err}); retry {} in {delay:?}", attempt + 1);
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}
