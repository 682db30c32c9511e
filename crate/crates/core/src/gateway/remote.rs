//! Chat-completions client (OpenAI-compatible wire format).
//!
//! Request body: `{"model", "messages": [{"role","content"}],
//! "max_completion_tokens", "temperature"?, "reasoning_effort"?}` posted to
//! `<base_url>/chat/completions` with a bearer token. The response is read
//! from `choices[0].message.content`, `choices[0].finish_reason` and
//! `usage.{prompt_tokens, completion_tokens,
//! completion_tokens_details.reasoning_tokens}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, FinishReason, GatewayError, ModelRequest, ModelResponse, Usage};

pub const API_KEY_ENV_DEFAULT: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: u64,
}

fn default_key_env() -> String {
    API_KEY_ENV_DEFAULT.to_string()
}

fn default_timeout() -> u64 {
    600
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: default_key_env(),
            timeout_seconds: default_timeout(),
        }
    }
}

pub struct OpenAiCompatibleBackend {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for OpenAiCompatibleBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiCompatibleBackend")
            .field("endpoint", &self.endpoint)
            .finish_non_exhaustive()
    }
}

impl OpenAiCompatibleBackend {
    pub fn new(config: &RemoteConfig, api_key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_seconds)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
            agent,
        }
    }

    /// Reads the API key from the configured environment variable.
    pub fn from_env(config: &RemoteConfig) -> Result<Self, GatewayError> {
        let key = std::env::var(&config.api_key_env).map_err(|_| {
            GatewayError::AuthFailure(format!("environment variable {} is not set", config.api_key_env))
        })?;
        Ok(Self::new(config, key))
    }
}

pub(crate) fn request_body(request: &ModelRequest) -> Value {
    let mut body = json!({
        "model": request.model_name,
        "messages": request.messages,
        "max_completion_tokens": request.sampling.max_output_tokens,
    });
    if let Some(t) = request.sampling.temperature {
        body["temperature"] = json!(t);
    }
    if let Some(e) = request.sampling.reasoning_effort {
        body["reasoning_effort"] = json!(e);
    }
    body
}

pub(crate) fn classify_status(status: u16, body: &str) -> GatewayError {
    let excerpt: String = body.chars().take(300).collect();
    match status {
        401 | 403 => GatewayError::AuthFailure(excerpt),
        429 => GatewayError::RateLimited(excerpt),
        400 | 413 if body.contains("context_length") || body.contains("maximum context") => {
            GatewayError::ContextOverflow(excerpt)
        }
        500..=599 | 408 => GatewayError::Transport(format!("status {status}: {excerpt}")),
        _ => GatewayError::Provider(format!("status {status}: {excerpt}")),
    }
}

pub(crate) fn parse_response(body: &str) -> Result<ModelResponse, GatewayError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::Provider(format!("unparseable response: {e}")))?;
    let choice = v
        .pointer("/choices/0")
        .ok_or_else(|| GatewayError::Provider("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    let n = |p: &str| v.pointer(p).and_then(Value::as_u64).unwrap_or(0);
    Ok(ModelResponse {
        text,
        usage: Usage {
            prompt_tokens: n("/usage/prompt_tokens"),
            completion_tokens: n("/usage/completion_tokens"),
            reasoning_tokens: n("/usage/completion_tokens_details/reasoning_tokens"),
        },
        finish_reason,
    })
}

impl Backend for OpenAiCompatibleBackend {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let body = request_body(request).to_string();
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body.as_str())
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        parse_response(&text)
    }
}
