//! OpenAI-compatible HTTP backend: `POST .../v1/chat/completions`.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatResponse, GatewayError, ModelSpec, TokenUsage};
use crate::prompt_store::Message;

pub struct HttpBackend;

impl HttpBackend {
    pub fn new() -> Self {
        HttpBackend
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
    #[serde(default)]
    total_tokens: u64,
}

/// Join the configured endpoint with the chat-completions path, unless the
/// endpoint already names it.
fn completions_url(endpoint: &str) -> String {
    if endpoint.contains("/chat/completions") {
        endpoint.to_string()
    } else {
        format!("{}/v1/chat/completions", endpoint.trim_end_matches('/'))
    }
}

impl ChatBackend for HttpBackend {
    fn send(
        &self,
        model: &ModelSpec,
        messages: &[Message],
        timeout: Duration,
    ) -> Result<ChatResponse, GatewayError> {
        let endpoint = model.endpoint.as_deref().ok_or_else(|| {
            GatewayError::InvalidModelSpec(format!("model {} has no endpoint", model.id))
        })?;
        let url = completions_url(endpoint);

        let wire_messages: Vec<WireMessage> = messages
            .iter()
            .map(|m| WireMessage {
                role: m.role.as_str(),
                content: &m.text,
            })
            .collect();
        let body = serde_json::to_string(&WireRequest {
            model: &model.model_name,
            messages: wire_messages,
            temperature: model.sampling.temperature,
            max_tokens: model.sampling.max_tokens,
        })
        .expect("request serializes");

        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let mut request = agent.post(&url).set("Content-Type", "application/json");
        if let Some(var) = &model.api_key_env {
            let key = std::env::var(var).map_err(|_| GatewayError::MissingApiKey(var.clone()))?;
            request = request.set("Authorization", &format!("Bearer {key}"));
        }

        let start = Instant::now();
        let response = match request.send_string(&body) {
            Ok(resp) => resp,
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                return Err(GatewayError::Provider { status, body });
            }
            Err(ureq::Error::Transport(t)) => {
                let detail = t.to_string();
                if detail.contains("timed out") || detail.contains("timeout") {
                    return Err(GatewayError::Timeout(timeout));
                }
                return Err(GatewayError::Transport(detail));
            }
        };
        let latency_us = start.elapsed().as_micros() as u64;

        let text = response
            .into_string()
            .map_err(|e| GatewayError::Transport(format!("reading body: {e}")))?;
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Transport(format!("malformed response JSON: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Transport("response has no choices".into()))?;
        let usage = parsed.usage.unwrap_or_default();
        Ok(ChatResponse {
            text: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason.unwrap_or_default(),
            usage: TokenUsage {
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
                total_tokens: usage.total_tokens,
            },
            latency_us,
        })
    }
}
