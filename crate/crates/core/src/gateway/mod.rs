//! Uniform chat-completion client over OpenAI-compatible endpoints and a
//! deterministic scripted mock backend, with disk caching, retries, and
//! per-provider in-flight limits.
//!
//! Callers see a blocking request/response contract; the gateway is safe to
//! share across threads.

mod cache;
mod http;
mod mock;

pub use cache::DiskCache;
pub use mock::{MockReply, MockRule, MockScript};

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prompt_store::Message;

/// Which kind of backend serves a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    OpenaiCompatible,
    LocalCompatible,
    Mock,
}

/// Sampling parameters sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            max_tokens: None,
        }
    }
}

/// One configured model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub provider: Provider,
    /// Base URL for HTTP providers; absent for mocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model_name: String,
    #[serde(default)]
    pub sampling: SamplingParams,
    /// Script path; required for mocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl ModelSpec {
    pub fn openai_compatible(id: &str, endpoint: &str, model_name: &str) -> Self {
        ModelSpec {
            id: id.to_string(),
            provider: Provider::OpenaiCompatible,
            endpoint: Some(endpoint.to_string()),
            model_name: model_name.to_string(),
            sampling: SamplingParams::default(),
            script: None,
            api_key_env: None,
        }
    }

    /// A deterministic scripted mock; see [`MockScript`] for the format.
    /// The script is loaded lazily on first use.
    pub fn mock(id: &str, script: impl Into<PathBuf>) -> Self {
        ModelSpec {
            id: id.to_string(),
            provider: Provider::Mock,
            endpoint: None,
            model_name: format!("mock:{id}"),
            sampling: SamplingParams::default(),
            script: Some(script.into()),
            api_key_env: None,
        }
    }

    /// Like [`ModelSpec::mock`], but parses the script now so a missing or
    /// malformed file fails here instead of at the first request.
    pub fn mock_from_script(id: &str, script: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let script = script.into();
        MockScript::load(&script)?;
        Ok(ModelSpec::mock(id, script))
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.sampling.temperature < 0.0 {
            return Err(GatewayError::InvalidModelSpec(format!(
                "model {}: negative temperature",
                self.id
            )));
        }
        match self.provider {
            Provider::Mock if self.script.is_none() => Err(GatewayError::InvalidModelSpec(
                format!("mock model {} requires a script path", self.id),
            )),
            Provider::OpenaiCompatible | Provider::LocalCompatible if self.endpoint.is_none() => {
                Err(GatewayError::InvalidModelSpec(format!(
                    "model {} requires an endpoint",
                    self.id
                )))
            }
            _ => Ok(()),
        }
    }

    /// Key used for per-provider in-flight limiting.
    fn provider_key(&self) -> String {
        match self.provider {
            Provider::Mock => format!(
                "mock:{}",
                self.script
                    .as_ref()
                    .map_or_else(String::new, |p| p.display().to_string())
            ),
            _ => format!("http:{}", self.endpoint.as_deref().unwrap_or("")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

/// A model reply plus transport metadata; this is what the cache stores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: String,
    pub usage: TokenUsage,
    pub latency_us: u64,
}

/// One completed request/response pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatExchange {
    pub model_id: String,
    pub cache_key: String,
    pub response: ChatResponse,
    pub from_cache: bool,
}

/// Retry/cache policy for a single `complete` call.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestPolicy {
    pub retries: u32,
    pub timeout: Duration,
    pub use_cache: bool,
    /// Extra value mixed into the cache key, for deliberately distinct
    /// repeats of an otherwise identical request.
    pub cache_salt: Option<String>,
    /// First backoff delay; doubles per retry, capped so the total backoff
    /// never exceeds `timeout`.
    pub backoff_base: Duration,
}

impl Default for RequestPolicy {
    fn default() -> Self {
        RequestPolicy {
            retries: 3,
            timeout: Duration::from_secs(120),
            use_cache: true,
            cache_salt: None,
            backoff_base: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("provider returned status {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("mock script {script} has no rule matching request")]
    MockScriptExhausted { script: String },
    #[error("malformed mock script {path} line {line}: {detail}")]
    MalformedScript {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Timeout(_) | GatewayError::RateLimited { .. } => true,
            GatewayError::Transport(_) => true,
            GatewayError::Provider { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Backoff delays for up to `retries` re-attempts. Each delay doubles from
/// `base`, and the running total is clamped so it never exceeds `budget`.
pub fn backoff_schedule(retries: u32, base: Duration, budget: Duration) -> Vec<Duration> {
    let mut delays = Vec::new();
    let mut total = Duration::ZERO;
    for attempt in 0..retries {
        let mut delay = base.saturating_mul(1u32 << attempt.min(20));
        let remaining = budget.saturating_sub(total);
        if remaining.is_zero() {
            break;
        }
        if delay > remaining {
            delay = remaining;
        }
        total += delay;
        delays.push(delay);
    }
    delays
}

/// Content digest over everything that determines a response:
/// model name, sampling, messages, and an optional salt.
pub fn cache_key(
    model_name: &str,
    sampling: &SamplingParams,
    messages: &[Message],
    salt: Option<&str>,
) -> String {
    #[derive(Serialize)]
    struct KeyMaterial<'a> {
        model: &'a str,
        temperature: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        max_tokens: Option<u32>,
        messages: &'a [Message],
        #[serde(skip_serializing_if = "Option::is_none")]
        salt: Option<&'a str>,
    }
    let material = KeyMaterial {
        model: model_name,
        temperature: sampling.temperature,
        max_tokens: sampling.max_tokens,
        messages,
        salt,
    };
    let json = serde_json::to_vec(&material).expect("key material serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hex::encode(hasher.finalize())
}

/// Backend abstraction: one attempt, no retries or caching.
pub trait ChatBackend: Send + Sync {
    fn send(
        &self,
        model: &ModelSpec,
        messages: &[Message],
        timeout: Duration,
    ) -> Result<ChatResponse, GatewayError>;
}

/// Per-key counting semaphore bounding concurrent requests.
struct InflightLimiter {
    max: usize,
    counts: Mutex<HashMap<String, usize>>,
    cv: Condvar,
}

impl InflightLimiter {
    fn new(max: usize) -> Self {
        InflightLimiter {
            max: max.max(1),
            counts: Mutex::new(HashMap::new()),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self, key: &str) -> InflightPermit<'_> {
        let mut counts = self.counts.lock().unwrap();
        while counts.get(key).copied().unwrap_or(0) >= self.max {
            counts = self.cv.wait(counts).unwrap();
        }
        *counts.entry(key.to_string()).or_insert(0) += 1;
        InflightPermit {
            limiter: self,
            key: key.to_string(),
        }
    }
}

struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
    key: String,
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut counts = self.limiter.counts.lock().unwrap();
        if let Some(n) = counts.get_mut(&self.key) {
            *n = n.saturating_sub(1);
        }
        self.limiter.cv.notify_all();
    }
}

/// The chat-completion gateway. Cheap to share behind an `Arc` or a
/// reference; all interior state is synchronized.
pub struct Gateway {
    cache: Option<DiskCache>,
    limiter: InflightLimiter,
    mocks: Mutex<HashMap<PathBuf, MockScript>>,
    http: http::HttpBackend,
    /// Test seam: replaces provider dispatch entirely when set.
    backend_override: Option<Arc<dyn ChatBackend>>,
    /// Sleeps are real by default; tests can zero them out.
    sleep_fn: fn(Duration),
}

impl Gateway {
    pub fn new(cache_dir: Option<PathBuf>, max_inflight: usize) -> Result<Self, GatewayError> {
        let cache = match cache_dir {
            Some(dir) => Some(DiskCache::open(&dir)?),
            None => None,
        };
        Ok(Gateway {
            cache,
            limiter: InflightLimiter::new(max_inflight),
            mocks: Mutex::new(HashMap::new()),
            http: http::HttpBackend::new(),
            backend_override: None,
            sleep_fn: std::thread::sleep,
        })
    }

    /// Route every request through `backend` instead of the provider
    /// dispatch. Caching, retries, and in-flight limits still apply.
    pub fn with_backend(
        cache_dir: Option<PathBuf>,
        max_inflight: usize,
        backend: Arc<dyn ChatBackend>,
    ) -> Result<Self, GatewayError> {
        let mut gw = Gateway::new(cache_dir, max_inflight)?;
        gw.backend_override = Some(backend);
        Ok(gw)
    }

    /// Disable retry sleeps (tests).
    pub fn without_backoff_sleep(mut self) -> Self {
        self.sleep_fn = |_| {};
        self
    }

    /// Issue one chat completion, honoring cache, retries, and limits.
    pub fn complete(
        &self,
        model: &ModelSpec,
        messages: &[Message],
        policy: &RequestPolicy,
    ) -> Result<ChatExchange, GatewayError> {
        model.validate()?;
        if messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if messages[0].role == crate::prompt_store::Role::Assistant {
            return Err(GatewayError::InvalidRequest(
                "first message must be system or user".into(),
            ));
        }

        let key = cache_key(
            &model.model_name,
            &model.sampling,
            messages,
            policy.cache_salt.as_deref(),
        );
        if policy.use_cache {
            if let Some(cache) = &self.cache {
                if let Some(response) = cache.get(&key)? {
                    return Ok(ChatExchange {
                        model_id: model.id.clone(),
                        cache_key: key,
                        response,
                        from_cache: true,
                    });
                }
            }
        }

        let _permit = self.limiter.acquire(&model.provider_key());
        let delays = backoff_schedule(policy.retries, policy.backoff_base, policy.timeout);
        let mut last_err: Option<GatewayError> = None;
        let mut attempts = 0u32;
        for attempt in 0..=policy.retries {
            if attempt > 0 {
                match delays.get(attempt as usize - 1) {
                    Some(delay) => (self.sleep_fn)(*delay),
                    None => break, // backoff budget exhausted
                }
            }
            attempts += 1;
            match self.dispatch(model, messages, policy.timeout) {
                Ok(response) => {
                    if policy.use_cache {
                        if let Some(cache) = &self.cache {
                            cache.put(&key, &response)?;
                        }
                    }
                    return Ok(ChatExchange {
                        model_id: model.id.clone(),
                        cache_key: key,
                        response,
                        from_cache: false,
                    });
                }
                Err(err) if err.is_retryable() => last_err = Some(err),
                Err(err) => return Err(err),
            }
        }
        match last_err {
            Some(GatewayError::Provider { status: 429, .. })
            | Some(GatewayError::RateLimited { .. }) => Err(GatewayError::RateLimited { attempts }),
            Some(err) => Err(err),
            None => unreachable!("at least one attempt is always made"),
        }
    }

    fn dispatch(
        &self,
        model: &ModelSpec,
        messages: &[Message],
        timeout: Duration,
    ) -> Result<ChatResponse, GatewayError> {
        if let Some(backend) = &self.backend_override {
            return backend.send(model, messages, timeout);
        }
        match model.provider {
            Provider::Mock => {
                let script_path = model.script.as_ref().expect("validated");
                let start = Instant::now();
                let mut mocks = self.mocks.lock().unwrap();
                if !mocks.contains_key(script_path) {
                    mocks.insert(script_path.clone(), MockScript::load(script_path)?);
                }
                let script = mocks.get_mut(script_path).expect("just inserted");
                let mut response = script.respond(messages)?;
                response.latency_us = start.elapsed().as_micros() as u64;
                Ok(response)
            }
            Provider::OpenaiCompatible | Provider::LocalCompatible => {
                self.http.send(model, messages, timeout)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_store::Role;

    fn msgs(pairs: &[(Role, &str)]) -> Vec<Message> {
        pairs.iter().map(|(r, t)| Message::new(*r, *t)).collect()
    }

    #[test]
    fn cache_key_is_deterministic_and_input_sensitive() {
        let sampling = SamplingParams::default();
        let a = msgs(&[(Role::System, "s"), (Role::User, "u")]);
        let k1 = cache_key("m", &sampling, &a, None);
        let k2 = cache_key("m", &sampling, &a, None);
        assert_eq!(k1, k2);
        let b = msgs(&[(Role::System, "s"), (Role::User, "v")]);
        assert_ne!(k1, cache_key("m", &sampling, &b, None));
        assert_ne!(k1, cache_key("m2", &sampling, &a, None));
        assert_ne!(k1, cache_key("m", &sampling, &a, Some("r2")));
        let hotter = SamplingParams {
            temperature: 0.2,
            max_tokens: None,
        };
        assert_ne!(k1, cache_key("m", &hotter, &a, None));
    }

    #[test]
    fn backoff_total_never_exceeds_budget() {
        // exhaustive small-grid check plus a coarse sweep
        for retries in 0..8u32 {
            for base_ms in [1u64, 7, 250, 10_000] {
                for budget_ms in [0u64, 1, 5, 300, 2_000] {
                    let delays = backoff_schedule(
                        retries,
                        Duration::from_millis(base_ms),
                        Duration::from_millis(budget_ms),
                    );
                    let total: Duration = delays.iter().sum();
                    assert!(
                        total <= Duration::from_millis(budget_ms),
                        "retries={retries} base={base_ms} budget={budget_ms} total={total:?}"
                    );
                    assert!(delays.len() <= retries as usize);
                }
            }
        }
    }

    #[test]
    fn backoff_doubles_until_capped() {
        let delays = backoff_schedule(4, Duration::from_millis(100), Duration::from_secs(10));
        assert_eq!(
            delays,
            vec![
                Duration::from_millis(100),
                Duration::from_millis(200),
                Duration::from_millis(400),
                Duration::from_millis(800),
            ]
        );
    }

    #[test]
    fn mock_from_script_validates_eagerly() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("ok.mock");
        std::fs::write(&good, "repeat .* => OK\n").unwrap();
        assert!(ModelSpec::mock_from_script("m", &good).is_ok());

        let bad = dir.path().join("bad.mock");
        std::fs::write(&bad, "sometimes .* => nope\n").unwrap();
        assert!(matches!(
            ModelSpec::mock_from_script("m", &bad),
            Err(GatewayError::MalformedScript { .. })
        ));
        assert!(matches!(
            ModelSpec::mock_from_script("m", dir.path().join("absent.mock")),
            Err(GatewayError::MalformedScript { .. })
        ));
    }

    #[test]
    fn mock_spec_requires_script() {
        let mut spec = ModelSpec::mock("m", "/tmp/x.mock");
        spec.script = None;
        assert!(matches!(
            spec.validate(),
            Err(GatewayError::InvalidModelSpec(_))
        ));
    }

    #[test]
    fn first_message_must_not_be_assistant() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("s.mock");
        std::fs::write(&script, "repeat .* => OK\n").unwrap();
        let gw = Gateway::new(None, 2).unwrap();
        let spec = ModelSpec::mock("m", &script);
        let err = gw
            .complete(
                &spec,
                &msgs(&[(Role::Assistant, "hi")]),
                &RequestPolicy::default(),
            )
            .unwrap_err();
        assert!(matches!(err, GatewayError::InvalidRequest(_)));
    }

    #[test]
    fn temperature_default_is_one() {
        assert_eq!(SamplingParams::default().temperature, 1.0);
        let spec: ModelSpec =
            serde_json::from_str(r#"{"id":"m","provider":"mock","model_name":"m","script":"s"}"#)
                .unwrap();
        assert_eq!(spec.sampling.temperature, 1.0);
    }
}
