//! Model gateway: the only place model inference (and network traffic)
//! happens.
//!
//! Everything above this layer talks to a [`Gateway`], which binds two
//! [`Backend`]s to the *reasoner* and *auxiliary* roles, applies the retry
//! policy and books token usage into a per-stage [`UsageLedger`].
//! [`ScriptedBackend`] is the deterministic offline double;
//! [`OpenAiCompatibleBackend`] talks to a chat-completions endpoint.

mod ledger;
mod remote;
mod scripted;

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ledger::{StageUsage, UsageLedger};
pub use remote::{OpenAiCompatibleBackend, RemoteConfig, API_KEY_ENV_DEFAULT};
pub use scripted::{
    estimate_tokens, Matcher, ScriptEntry, ScriptFile, ScriptMode, ScriptedBackend, ScriptedFailure,
    ScriptedReply, TranscriptEntry,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningEffort {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    /// `None` leaves the provider default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_effort: Option<ReasoningEffort>,
}

/// Pipeline stage a request belongs to; the ledger partitions usage by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Captioning,
    Selection,
    Solving,
    Retry,
    Abstraction,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Captioning,
        Stage::Selection,
        Stage::Solving,
        Stage::Retry,
        Stage::Abstraction,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Captioning => "captioning",
            Stage::Selection => "selection",
            Stage::Solving => "solving",
            Stage::Retry => "retry",
            Stage::Abstraction => "abstraction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub model_name: String,
    pub messages: Vec<Message>,
    pub sampling: Sampling,
    pub stage: Stage,
}

impl ModelRequest {
    pub fn new(
        model_name: impl Into<String>,
        messages: Vec<Message>,
        sampling: Sampling,
        stage: Stage,
    ) -> Result<Self, GatewayError> {
        let req = Self {
            model_name: model_name.into(),
            messages,
            sampling,
            stage,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.messages.first() {
            None => Err(GatewayError::InvalidRequest("no messages".into())),
            Some(m) if m.role == Role::Assistant => Err(GatewayError::InvalidRequest(
                "first message must be system or user".into(),
            )),
            _ if self.sampling.max_output_tokens == 0 => {
                Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()))
            }
            _ if self.sampling.temperature.is_some_and(|t| t.is_nan() || t < 0.0) => {
                Err(GatewayError::InvalidRequest("temperature must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// All message contents joined by newlines; what matchers and leak
    /// scans look at.
    pub fn full_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Token counts. `reasoning_tokens` is a breakdown of `completion_tokens`,
/// following the chat-completions convention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub reasoning_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    pub fn add(&mut self, other: &Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.reasoning_tokens += other.reasoning_tokens;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    #[default]
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub usage: Usage,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("context window exceeded: {0}")]
    ContextOverflow(String),
    #[error("script exhausted at call {call}")]
    ScriptExhausted { call: usize },
    #[error("no script entry matches call {call}: {excerpt}")]
    UnmatchedRequest { call: usize, excerpt: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider error: {0}")]
    Provider(String),
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::RateLimited(_) | GatewayError::Transport(_))
    }
}

/// Behavioral contract for any model implementation. Implementations must be
/// callable from many threads.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(default = "yes")]
    pub jitter: bool,
}

fn yes() -> bool {
    true
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            jitter: false,
        }
    }

    /// Delay before retry number `retry` (0-based): `base * 2^retry`,
    /// scaled by a factor in `[0.5, 1.0]` when jittered.
    pub fn delay(&self, retry: u32) -> Duration {
        let d = self.base_delay.saturating_mul(1u32 << retry.min(16));
        if self.jitter && !d.is_zero() {
            d.mul_f64(rand::thread_rng().gen_range(0.5..=1.0))
        } else {
            d
        }
    }
}

/// Returns the first successful response. Transient failures are retried
/// with exponential backoff; permanent ones surface immediately.
pub fn complete_with_retry(
    backend: &dyn Backend,
    request: &ModelRequest,
    policy: &RetryPolicy,
) -> Result<ModelResponse, GatewayError> {
    if policy.max_attempts == 0 {
        return Err(GatewayError::InvalidRequest("max_attempts must be >= 1".into()));
    }
    request.validate()?;
    let mut attempt = 0;
    loop {
        match backend.complete(request) {
            Ok(r) => return Ok(r),
            Err(e) if e.is_transient() && attempt + 1 < policy.max_attempts => {
                log::debug!("transient model failure (attempt {}): {e}", attempt + 1);
                std::thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Reasoner,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub model_name: String,
    pub sampling: Sampling,
}

impl RoleConfig {
    pub fn reasoner_default() -> Self {
        Self {
            model_name: "o4-mini".into(),
            sampling: Sampling {
                temperature: None,
                max_output_tokens: 32_000,
                reasoning_effort: Some(ReasoningEffort::Medium),
            },
        }
    }

    pub fn auxiliary_default() -> Self {
        Self {
            model_name: "gpt-4.1".into(),
            sampling: Sampling {
                temperature: Some(0.3),
                max_output_tokens: 1_000,
                reasoning_effort: None,
            },
        }
    }
}

pub const ABSTRACTION_MAX_OUTPUT_TOKENS: u32 = 4_000;

/// Role-bound backends plus retry policy and usage accounting.
pub struct Gateway {
    reasoner: Arc<dyn Backend>,
    auxiliary: Arc<dyn Backend>,
    pub reasoner_config: RoleConfig,
    pub auxiliary_config: RoleConfig,
    pub abstraction_max_output_tokens: u32,
    pub retry: RetryPolicy,
    ledger: Mutex<UsageLedger>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("reasoner_config", &self.reasoner_config)
            .field("auxiliary_config", &self.auxiliary_config)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(reasoner: Arc<dyn Backend>, auxiliary: Arc<dyn Backend>) -> Self {
        Self {
            reasoner,
            auxiliary,
            reasoner_config: RoleConfig::reasoner_default(),
            auxiliary_config: RoleConfig::auxiliary_default(),
            abstraction_max_output_tokens: ABSTRACTION_MAX_OUTPUT_TOKENS,
            retry: RetryPolicy::default(),
            ledger: Mutex::new(UsageLedger::default()),
        }
    }

    /// Both roles served by one backend (the usual offline setup).
    pub fn single(backend: Arc<dyn Backend>) -> Self {
        Self::new(backend.clone(), backend)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn request(&self, role: ModelRole, stage: Stage, messages: Vec<Message>) -> Result<ModelRequest, GatewayError> {
        let cfg = match role {
            ModelRole::Reasoner => &self.reasoner_config,
            ModelRole::Auxiliary => &self.auxiliary_config,
        };
        let mut sampling = cfg.sampling.clone();
        if role == ModelRole::Auxiliary && stage == Stage::Abstraction {
            sampling.max_output_tokens = sampling.max_output_tokens.max(self.abstraction_max_output_tokens);
        }
        ModelRequest::new(cfg.model_name.clone(), messages, sampling, stage)
    }

    pub fn send(&self, role: ModelRole, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let backend: &dyn Backend = match role {
            ModelRole::Reasoner => self.reasoner.as_ref(),
            ModelRole::Auxiliary => self.auxiliary.as_ref(),
        };
        let resp = complete_with_retry(backend, request, &self.retry)?;
        self.ledger
            .lock()
            .expect("ledger lock")
            .record(request.stage, &resp.usage);
        Ok(resp)
    }

    pub fn complete(&self, role: ModelRole, stage: Stage, messages: Vec<Message>) -> Result<ModelResponse, GatewayError> {
        let req = self.request(role, stage, messages)?;
        self.send(role, &req)
    }

    pub fn ledger(&self) -> UsageLedger {
        self.ledger.lock().expect("ledger lock").clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> ModelRequest {
        ModelRequest::new(
            "m",
            vec![Message::user("please solve this")],
            RoleConfig::auxiliary_default().sampling,
            Stage::Solving,
        )
        .unwrap()
    }

    fn ok(text: &str) -> ScriptedReply {
        ScriptedReply::Response(ModelResponse {
            text: text.into(),
            usage: Usage::default(),
            finish_reason: FinishReason::Stop,
        })
    }

    #[test]
    fn request_invariants() {
        let s = RoleConfig::auxiliary_default().sampling;
        assert!(ModelRequest::new("m", vec![], s.clone(), Stage::Solving).is_err());
        assert!(ModelRequest::new("m", vec![Message::assistant("x")], s.clone(), Stage::Solving).is_err());
        assert!(ModelRequest::new("m", vec![Message::system("x")], s, Stage::Solving).is_ok());
    }

    #[test]
    fn single_success_is_one_call() {
        let b = ScriptedBackend::positional(vec![ok("fine")]);
        let r = complete_with_retry(&b, &req(), &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(r.text, "fine");
        assert_eq!(b.calls(), 1);
    }

    #[test]
    fn transient_failures_are_retried() {
        let b = ScriptedBackend::positional(vec![
            ScriptedReply::Error(ScriptedFailure::RateLimited),
            ScriptedReply::Error(ScriptedFailure::Transport),
            ok("third time"),
        ]);
        let r = complete_with_retry(&b, &req(), &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(r.text, "third time");
        assert_eq!(b.calls(), 3);

        let b = ScriptedBackend::positional(vec![
            ScriptedReply::Error(ScriptedFailure::RateLimited),
            ScriptedReply::Error(ScriptedFailure::RateLimited),
            ok("late"),
        ]);
        assert!(matches!(
            complete_with_retry(&b, &req(), &RetryPolicy::immediate(2)),
            Err(GatewayError::RateLimited(_))
        ));
        assert_eq!(b.calls(), 2);
    }

    #[test]
    fn permanent_failures_surface_immediately() {
        for failure in [ScriptedFailure::Auth, ScriptedFailure::ContextOverflow] {
            let b = ScriptedBackend::positional(vec![ScriptedReply::Error(failure), ok("never")]);
            assert!(complete_with_retry(&b, &req(), &RetryPolicy::immediate(5)).is_err());
            assert_eq!(b.calls(), 1);
        }
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(10),
            jitter: false,
        };
        assert_eq!(p.delay(0), Duration::from_millis(10));
        assert_eq!(p.delay(3), Duration::from_millis(80));
        let j = RetryPolicy { jitter: true, ..p };
        for i in 0..4 {
            let d = j.delay(i);
            assert!(d <= Duration::from_millis(10 << i) && d >= Duration::from_millis(5 << i));
        }
    }

    #[test]
    fn gateway_applies_role_defaults_and_books_usage() {
        let b = Arc::new(ScriptedBackend::positional(vec![ok("a"), ok("bb")]));
        let gw = Gateway::single(b.clone()).with_retry(RetryPolicy::immediate(1));
        gw.complete(ModelRole::Auxiliary, Stage::Abstraction, vec![Message::user("x")]).unwrap();
        gw.complete(ModelRole::Reasoner, Stage::Solving, vec![Message::user("y")]).unwrap();
        let t = b.transcript();
        assert_eq!(t[0].request.sampling.max_output_tokens, ABSTRACTION_MAX_OUTPUT_TOKENS);
        assert_eq!(t[0].request.sampling.temperature, Some(0.3));
        assert_eq!(t[1].request.sampling.max_output_tokens, 32_000);
        assert_eq!(t[1].request.sampling.reasoning_effort, Some(ReasoningEffort::Medium));
        let ledger = gw.ledger();
        assert_eq!(ledger.stage(Stage::Abstraction).calls, 1);
        assert_eq!(ledger.stage(Stage::Captioning).usage.total(), 0);
        let transcript_total: u64 = t
            .iter()
            .filter_map(|e| e.outcome.as_ref().ok())
            .map(|r| r.usage.total())
            .sum();
        assert_eq!(ledger.total().total(), transcript_total);
    }
}
