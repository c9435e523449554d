use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};
use tiny_http::{Response, Server};

use icl_dst::embedder::{EmbedItem, Embedder, ServiceConfig, ServiceEmbedder};
use icl_dst::http::RetryPolicy;
use icl_dst::llm::{complete, GenerationParams, LlmBackendDescriptor, LlmError};
use icl_dst::prompt::TokenCounterConfig;
use icl_dst::TokenCounter;

/// Serves `replies` (status, body) in order, one per request, and records
/// each request body.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Value>>>) {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", server.server_addr().to_ip().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let Ok(mut request) = server.recv() else { return };
            let mut text = String::new();
            request.as_reader().read_to_string(&mut text).unwrap();
            log.lock().unwrap().push(serde_json::from_str(&text).unwrap_or(Value::Null));
            let response = Response::from_string(body)
                .with_status_code(status)
                .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
            let _ = request.respond(response);
        }
    });
    (url, seen)
}

fn backend(url: &str, retries: u32) -> Box<dyn icl_dst::CompletionBackend> {
    let mut d = LlmBackendDescriptor::http(url, "test-model");
    d.max_retries = retries;
    d.backoff_base_secs = 0.01;
    d.request_timeout_secs = 5.0;
    d.api_key_env = "ICL_DST_TEST_UNSET_KEY".into();
    d.build().unwrap()
}

fn ok_body(text: &str) -> String {
    json!({"choices": [{"text": text}]}).to_string()
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = serve(vec![(500, "boom".into()), (500, "boom".into()), (200, ok_body("centre\" , more"))]);
    let out = complete("x: \"", &GenerationParams::slot_value(), backend(&url, 3).as_ref()).unwrap();
    assert_eq!(out.text, "centre");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[2]["model"], "test-model");
    assert_eq!(seen[2]["stop"], json!(["\""]));
    assert_eq!(seen[2]["temperature"], 0.0);
}

#[test]
fn gives_up_after_max_retries() {
    let (url, seen) = serve(vec![(503, "busy".into()); 3]);
    let err = complete("p", &GenerationParams::key_value(), backend(&url, 2).as_ref()).unwrap_err();
    assert!(matches!(err, LlmError::Backend(ref m) if m.contains("503")), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn context_overflow_is_not_retried() {
    let body = json!({"error": {"message": "This model's maximum context length is 2048 tokens"}}).to_string();
    let (url, seen) = serve(vec![(400, body), (200, ok_body("unused"))]);
    let err = complete("p", &GenerationParams::key_value(), backend(&url, 3).as_ref()).unwrap_err();
    assert!(matches!(err, LlmError::ContextOverflow(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(401, "no key".into()), (200, ok_body("unused"))]);
    assert!(complete("p", &GenerationParams::key_value(), backend(&url, 3).as_ref()).is_err());
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_response_is_an_error() {
    let (url, _) = serve(vec![(200, json!({"choices": []}).to_string())]);
    let err = complete("p", &GenerationParams::key_value(), backend(&url, 0).as_ref()).unwrap_err();
    assert!(matches!(err, LlmError::Backend(ref m) if m.contains("choices")));
}

fn service(url: &str, dim: Option<usize>) -> ServiceEmbedder {
    ServiceEmbedder::new(ServiceConfig {
        url: url.into(),
        model: "emb".into(),
        dim,
        batch_size: 8,
        parallelism: 1,
        timeout_secs: 5.0,
        retry: RetryPolicy { max_retries: 2, base_delay_secs: 0.01, factor: 2.0 },
        api_key_env: None,
    })
    .unwrap()
}

#[test]
fn embedding_service_orders_by_index_and_normalizes() {
    let body = json!({"data": [
        {"index": 1, "embedding": [0.0, 2.0, 0.0]},
        {"index": 0, "embedding": [3.0, 0.0, 4.0]},
    ]})
    .to_string();
    let (url, seen) = serve(vec![(502, "".into()), (200, body)]);
    let e = service(&url, Some(3));
    let items = [EmbedItem { id: "a", text: "first" }, EmbedItem { id: "b", text: "second" }];
    let v = e.embed(&items).unwrap();
    assert_eq!(v[0].values(), &[0.6, 0.0, 0.8]);
    assert_eq!(v[1].values(), &[0.0, 1.0, 0.0]);
    assert_eq!(seen.lock().unwrap()[1]["input"], json!(["first", "second"]));
}

#[test]
fn embedding_service_dimension_mismatch() {
    let body = json!({"data": [{"index": 0, "embedding": [1.0, 0.0]}]}).to_string();
    let (url, _) = serve(vec![(200, body)]);
    let err = service(&url, Some(3)).embed(&[EmbedItem { id: "a", text: "x" }]).unwrap_err();
    assert!(err.to_string().contains("dimension"), "{err}");
}

#[test]
fn token_endpoint_and_fallback() {
    let (url, _) = serve(vec![(200, json!({"count": 7}).to_string())]);
    let counter = TokenCounter::from_config(&TokenCounterConfig::Endpoint { url, model: "m".into() });
    assert_eq!(counter.estimate("a longer text than seven tokens by bytes"), 7);

    // nothing listening: falls back to ceil(bytes / 4)
    let dead = TokenCounter::from_config(&TokenCounterConfig::Endpoint {
        url: "http://127.0.0.1:9/tokenize".into(),
        model: "m".into(),
    });
    assert_eq!(dead.estimate("abcde"), 2);
}
