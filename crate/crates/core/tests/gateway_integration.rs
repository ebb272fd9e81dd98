//! Gateway behavior across backends: caching, retries, concurrency caps,
//! and the OpenAI-compatible wire format against a local HTTP server.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use specprobe_core::gateway::{
    ChatBackend, ChatResponse, Gateway, GatewayError, ModelSpec, RequestPolicy, TokenUsage,
};
use specprobe_core::prompt_store::{Message, Role};

fn chat(system: &str, user: &str) -> Vec<Message> {
    vec![
        Message::new(Role::System, system),
        Message::new(Role::User, user),
    ]
}

fn fast_policy() -> RequestPolicy {
    RequestPolicy {
        retries: 3,
        timeout: Duration::from_secs(5),
        use_cache: true,
        cache_salt: None,
        backoff_base: Duration::from_millis(1),
    }
}

fn write_script(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

#[test]
fn scripted_mock_replies() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path(), "judge.mock", "repeat .* => JJ\n");
    let gw = Gateway::new(None, 4).unwrap();
    let model = ModelSpec::mock("mut", &script);
    let exchange = gw
        .complete(&model, &chat("tag words", "quick; quick"), &fast_policy())
        .unwrap();
    assert_eq!(exchange.response.text, "JJ");
    assert_eq!(exchange.response.usage, TokenUsage::default());
    assert!(!exchange.from_cache);
}

#[test]
fn cache_hit_skips_backend_entirely() {
    let dir = tempfile::tempdir().unwrap();
    // one-shot script: a second real request would exhaust it
    let script = write_script(dir.path(), "once.mock", "once .* => reply\n");
    let cache_dir = dir.path().join("cache");
    let gw = Gateway::new(Some(cache_dir), 4).unwrap();
    let model = ModelSpec::mock("m", &script);
    let messages = chat("s", "u");

    let first = gw.complete(&model, &messages, &fast_policy()).unwrap();
    let second = gw.complete(&model, &messages, &fast_policy()).unwrap();
    assert!(!first.from_cache);
    assert!(second.from_cache);
    assert_eq!(first.response, second.response);
    assert_eq!(first.cache_key, second.cache_key);
}

#[test]
fn rate_limit_then_success_consumes_one_retry() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        "flaky.mock",
        "once .* => !429 slow down\nonce .* => recovered\n",
    );
    let gw = Gateway::new(None, 4).unwrap().without_backoff_sleep();
    let model = ModelSpec::mock("m", &script);
    let exchange = gw
        .complete(&model, &chat("s", "u"), &fast_policy())
        .unwrap();
    assert_eq!(exchange.response.text, "recovered");
}

#[test]
fn persistent_rate_limit_surfaces_after_retries() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path(), "limited.mock", "repeat .* => !429 no\n");
    let gw = Gateway::new(None, 4).unwrap().without_backoff_sleep();
    let model = ModelSpec::mock("m", &script);
    let mut policy = fast_policy();
    policy.retries = 2;
    let err = gw.complete(&model, &chat("s", "u"), &policy).unwrap_err();
    match err {
        GatewayError::RateLimited { attempts } => assert_eq!(attempts, 3),
        other => panic!("expected RateLimited, got {other}"),
    }
}

#[test]
fn exhausted_script_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path(), "one.mock", "once .* => only\n");
    let gw = Gateway::new(None, 4).unwrap();
    let model = ModelSpec::mock("m", &script);
    gw.complete(&model, &chat("s", "a"), &fast_policy())
        .unwrap();
    let err = gw
        .complete(&model, &chat("s", "b"), &fast_policy())
        .unwrap_err();
    assert!(matches!(err, GatewayError::MockScriptExhausted { .. }));
}

#[test]
fn cache_salt_separates_otherwise_identical_requests() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        "two.mock",
        "once .* => first\nonce .* => second\n",
    );
    let cache_dir = dir.path().join("cache");
    let gw = Gateway::new(Some(cache_dir), 4).unwrap();
    let model = ModelSpec::mock("m", &script);
    let messages = chat("s", "u");

    let mut p1 = fast_policy();
    p1.cache_salt = Some("repeat-1".into());
    let mut p2 = fast_policy();
    p2.cache_salt = Some("repeat-2".into());

    let a = gw.complete(&model, &messages, &p1).unwrap();
    let b = gw.complete(&model, &messages, &p2).unwrap();
    assert_eq!(a.response.text, "first");
    assert_eq!(b.response.text, "second");
    assert_ne!(a.cache_key, b.cache_key);
    // replays hit their own entries
    assert!(gw.complete(&model, &messages, &p1).unwrap().from_cache);
    assert!(gw.complete(&model, &messages, &p2).unwrap().from_cache);
}

struct CountingBackend {
    inflight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
}

impl ChatBackend for CountingBackend {
    fn send(
        &self,
        _model: &ModelSpec,
        _messages: &[Message],
        _timeout: Duration,
    ) -> Result<ChatResponse, GatewayError> {
        let now = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(10));
        self.inflight.fetch_sub(1, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(ChatResponse {
            text: "ok".into(),
            finish_reason: "stop".into(),
            usage: TokenUsage::default(),
            latency_us: 0,
        })
    }
}

#[test]
fn inflight_cap_is_enforced_per_provider() {
    let backend = Arc::new(CountingBackend {
        inflight: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
        calls: AtomicUsize::new(0),
    });
    let gw = Arc::new(Gateway::with_backend(None, 2, backend.clone()).unwrap());
    let model = ModelSpec::mock("m", "/nonexistent.mock"); // spec only; backend is overridden

    std::thread::scope(|scope| {
        for i in 0..12 {
            let gw = gw.clone();
            let model = model.clone();
            scope.spawn(move || {
                let mut policy = fast_policy();
                policy.use_cache = false;
                gw.complete(&model, &chat("s", &format!("u{i}")), &policy)
                    .unwrap();
            });
        }
    });

    assert_eq!(backend.calls.load(Ordering::SeqCst), 12);
    assert!(
        backend.peak.load(Ordering::SeqCst) <= 2,
        "peak inflight {} exceeded cap 2",
        backend.peak.load(Ordering::SeqCst)
    );
}

// --- HTTP wire format against a local server ---

/// Request body and Authorization header captured by the fixture server.
type RecordedRequest = (String, Option<String>);

struct HttpFixture {
    url: String,
    requests: Arc<std::sync::Mutex<Vec<RecordedRequest>>>,
    handle: Option<std::thread::JoinHandle<()>>,
    server: Arc<tiny_http::Server>,
}

impl HttpFixture {
    /// Serve `responses` in order: `(status, body)` pairs. Records each
    /// request's body and Authorization header.
    fn start(responses: Vec<(u16, String)>) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}", server.server_addr());
        let requests = Arc::new(std::sync::Mutex::new(Vec::new()));
        let requests_clone = requests.clone();
        let server_clone = server.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok(mut request) = server_clone.recv() else {
                    return;
                };
                let mut req_body = String::new();
                request.as_reader().read_to_string(&mut req_body).ok();
                let auth = request
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv("Authorization"))
                    .map(|h| h.value.as_str().to_string());
                requests_clone.lock().unwrap().push((req_body, auth));
                let response =
                    tiny_http::Response::from_string(body.clone()).with_status_code(status);
                request.respond(response).ok();
            }
        });
        HttpFixture {
            url,
            requests,
            handle: Some(handle),
            server,
        }
    }
}

impl Drop for HttpFixture {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            h.join().ok();
        }
    }
}

fn ok_completion(text: &str) -> String {
    serde_json::json!({
        "id": "chatcmpl-1",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": "stop"
        }],
        "usage": {"prompt_tokens": 7, "completion_tokens": 2, "total_tokens": 9}
    })
    .to_string()
}

#[test]
fn http_request_and_response_follow_wire_format() {
    let fixture = HttpFixture::start(vec![(200, ok_completion("JJ"))]);
    std::env::set_var("SPECPROBE_TEST_KEY", "sk-test-123");

    let mut model = ModelSpec::openai_compatible("gpt", &fixture.url, "gpt-test");
    model.api_key_env = Some("SPECPROBE_TEST_KEY".into());
    model.sampling.max_tokens = Some(64);

    let gw = Gateway::new(None, 4).unwrap();
    let exchange = gw
        .complete(&model, &chat("tag words", "dog; dog"), &fast_policy())
        .unwrap();
    assert_eq!(exchange.response.text, "JJ");
    assert_eq!(exchange.response.finish_reason, "stop");
    assert_eq!(exchange.response.usage.total_tokens, 9);

    let recorded = fixture.requests.lock().unwrap();
    let (body, auth) = &recorded[0];
    assert_eq!(auth.as_deref(), Some("Bearer sk-test-123"));
    let parsed: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(parsed["model"], "gpt-test");
    assert_eq!(parsed["temperature"], 1.0);
    assert_eq!(parsed["max_tokens"], 64);
    assert_eq!(parsed["messages"][0]["role"], "system");
    assert_eq!(parsed["messages"][0]["content"], "tag words");
    assert_eq!(parsed["messages"][1]["role"], "user");
    assert_eq!(parsed["messages"][1]["content"], "dog; dog");
}

#[test]
fn http_5xx_retries_then_succeeds() {
    let fixture = HttpFixture::start(vec![
        (500, "oops".to_string()),
        (200, ok_completion("recovered")),
    ]);
    let model = ModelSpec::openai_compatible("m", &fixture.url, "m");
    let gw = Gateway::new(None, 4).unwrap().without_backoff_sleep();
    let exchange = gw
        .complete(&model, &chat("s", "u"), &fast_policy())
        .unwrap();
    assert_eq!(exchange.response.text, "recovered");
    assert_eq!(fixture.requests.lock().unwrap().len(), 2);
}

#[test]
fn http_4xx_is_fatal_without_retry() {
    let fixture = HttpFixture::start(vec![(400, "bad request".to_string())]);
    let model = ModelSpec::openai_compatible("m", &fixture.url, "m");
    let gw = Gateway::new(None, 4).unwrap().without_backoff_sleep();
    let err = gw
        .complete(&model, &chat("s", "u"), &fast_policy())
        .unwrap_err();
    match err {
        GatewayError::Provider { status, .. } => assert_eq!(status, 400),
        other => panic!("expected Provider, got {other}"),
    }
    assert_eq!(fixture.requests.lock().unwrap().len(), 1);
}

#[test]
fn missing_api_key_env_is_reported() {
    let mut model = ModelSpec::openai_compatible("m", "http://127.0.0.1:1", "m");
    model.api_key_env = Some("SPECPROBE_DEFINITELY_UNSET".into());
    let gw = Gateway::new(None, 4).unwrap();
    let err = gw
        .complete(&model, &chat("s", "u"), &fast_policy())
        .unwrap_err();
    assert!(matches!(err, GatewayError::MissingApiKey(_)));
}
