//! Deterministic scripted backend for offline runs and golden transcripts.
//!
//! Two modes:
//! * `positional`: call *n* consumes entry *n*; its matcher must accept the
//!   request. Requires single-flight use.
//! * `matching`: each call takes the first entry, in script order, that is
//!   unconsumed (or marked `repeat`) and whose matcher accepts the request.
//!   Safe under concurrency because matching is serialized internally.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, FinishReason, GatewayError, ModelRequest, ModelResponse, Stage, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptMode {
    Positional,
    Matching,
}

/// Request predicate. Every present field must hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Substrings that must all occur in the conversation text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// Substrings that must not occur.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes: Vec<String>,
    /// 0-based call index this entry is restricted to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

impl Matcher {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn contains(s: impl Into<String>) -> Self {
        Self {
            contains: vec![s.into()],
            ..Self::default()
        }
    }

    pub fn stage(mut self, stage: Stage) -> Self {
        self.stage = Some(stage);
        self
    }

    pub fn and_contains(mut self, s: impl Into<String>) -> Self {
        self.contains.push(s.into());
        self
    }

    pub fn excluding(mut self, s: impl Into<String>) -> Self {
        self.excludes.push(s.into());
        self
    }

    pub fn matches(&self, call: usize, request: &ModelRequest) -> bool {
        if self.stage.is_some_and(|s| s != request.stage) {
            return false;
        }
        if self.model.as_ref().is_some_and(|m| *m != request.model_name) {
            return false;
        }
        if self.position.is_some_and(|p| p != call) {
            return false;
        }
        let text = request.full_text();
        self.contains.iter().all(|c| text.contains(c.as_str()))
            && !self.excludes.iter().any(|c| text.contains(c.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    Auth,
    RateLimited,
    Transport,
    ContextOverflow,
}

impl ScriptedFailure {
    fn to_error(self) -> GatewayError {
        let msg = "scripted".to_string();
        match self {
            ScriptedFailure::Auth => GatewayError::AuthFailure(msg),
            ScriptedFailure::RateLimited => GatewayError::RateLimited(msg),
            ScriptedFailure::Transport => GatewayError::Transport(msg),
            ScriptedFailure::ContextOverflow => GatewayError::ContextOverflow(msg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedReply {
    Response(ModelResponse),
    Error(ScriptedFailure),
    /// Text whose usage is estimated from request and reply lengths.
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub reply: ScriptedReply,
    pub repeat: bool,
}

impl ScriptEntry {
    pub fn new(matcher: Matcher, reply: ScriptedReply) -> Self {
        Self {
            matcher,
            reply,
            repeat: false,
        }
    }

    pub fn text(matcher: Matcher, text: impl Into<String>) -> Self {
        Self::new(matcher, ScriptedReply::Text(text.into()))
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

/// On-disk script: `{"mode": "matching", "entries": [...]}`. Each entry has a
/// `match` object, `repeat`, and exactly one of `text`, `response` or `error`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptFile {
    pub mode: ScriptMode,
    pub entries: Vec<ScriptFileEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptFileEntry {
    #[serde(rename = "match", default)]
    pub matcher: Matcher,
    #[serde(default)]
    pub repeat: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ModelResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ScriptedFailure>,
}

impl ScriptFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn into_backend(self) -> Result<ScriptedBackend, String> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.into_iter().enumerate() {
            let reply = match (e.text, e.response, e.error) {
                (Some(t), None, None) => ScriptedReply::Text(t),
                (None, Some(r), None) => ScriptedReply::Response(r),
                (None, None, Some(f)) => ScriptedReply::Error(f),
                _ => return Err(format!("script entry {i}: need exactly one of text/response/error")),
            };
            entries.push(ScriptEntry {
                matcher: e.matcher,
                reply,
                repeat: e.repeat,
            });
        }
        ScriptedBackend::new(self.mode, entries).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub call: usize,
    pub request: ModelRequest,
    pub outcome: Result<ModelResponse, GatewayError>,
}

#[derive(Debug)]
struct State {
    consumed: Vec<bool>,
    calls: usize,
    transcript: Vec<TranscriptEntry>,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    mode: ScriptMode,
    entries: Vec<ScriptEntry>,
    state: Mutex<State>,
}

/// Rough token estimate (4 bytes per token, rounded up).
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

impl ScriptedBackend {
    pub fn new(mode: ScriptMode, entries: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        if entries.is_empty() {
            return Err(GatewayError::InvalidRequest("script must not be empty".into()));
        }
        let n = entries.len();
        Ok(Self {
            mode,
            entries,
            state: Mutex::new(State {
                consumed: vec![false; n],
                calls: 0,
                transcript: Vec::new(),
            }),
        })
    }

    /// Positional script whose entries accept any request.
    pub fn positional(replies: Vec<ScriptedReply>) -> Self {
        Self::new(
            ScriptMode::Positional,
            replies
                .into_iter()
                .map(|r| ScriptEntry::new(Matcher::any(), r))
                .collect(),
        )
        .expect("non-empty script")
    }

    pub fn matching(entries: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        Self::new(ScriptMode::Matching, entries)
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        ScriptFile::load(path)?.into_backend()
    }

    pub fn calls(&self) -> usize {
        self.state.lock().expect("script lock").calls
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.state.lock().expect("script lock").transcript.clone()
    }

    pub fn transcript_json(&self) -> String {
        serde_json::to_string_pretty(&self.transcript()).expect("transcript serializes")
    }

    /// Entries never consumed (repeatable entries excluded).
    pub fn unconsumed(&self) -> usize {
        let st = self.state.lock().expect("script lock");
        self.entries
            .iter()
            .zip(&st.consumed)
            .filter(|(e, c)| !e.repeat && !**c)
            .count()
    }

    fn pick(&self, st: &mut State, call: usize, request: &ModelRequest) -> Result<usize, GatewayError> {
        let excerpt = || {
            let text = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");
            let cut: String = text.chars().take(120).collect();
            format!("[{}] {cut}", request.stage)
        };
        match self.mode {
            ScriptMode::Positional => {
                if call >= self.entries.len() {
                    return Err(GatewayError::ScriptExhausted { call });
                }
                if !self.entries[call].matcher.matches(call, request) {
                    return Err(GatewayError::UnmatchedRequest { call, excerpt: excerpt() });
                }
                Ok(call)
            }
            ScriptMode::Matching => {
                let found = self.entries.iter().enumerate().position(|(i, e)| {
                    (e.repeat || !st.consumed[i]) && e.matcher.matches(call, request)
                });
                match found {
                    Some(i) => Ok(i),
                    None => {
                        let live = self
                            .entries
                            .iter()
                            .enumerate()
                            .any(|(i, e)| e.repeat || !st.consumed[i]);
                        if live {
                            Err(GatewayError::UnmatchedRequest { call, excerpt: excerpt() })
                        } else {
                            Err(GatewayError::ScriptExhausted { call })
                        }
                    }
                }
            }
        }
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let mut st = self.state.lock().expect("script lock");
        let call = st.calls;
        st.calls += 1;
        let outcome = self.pick(&mut st, call, request).and_then(|i| {
            st.consumed[i] = true;
            match &self.entries[i].reply {
                ScriptedReply::Response(r) => Ok(r.clone()),
                ScriptedReply::Error(f) => Err(f.to_error()),
                ScriptedReply::Text(t) => Ok(ModelResponse {
                    text: t.clone(),
                    usage: Usage {
                        prompt_tokens: estimate_tokens(&request.full_text()),
                        completion_tokens: estimate_tokens(t),
                        reasoning_tokens: 0,
                    },
                    finish_reason: FinishReason::Stop,
                }),
            }
        });
        st.transcript.push(TranscriptEntry {
            call,
            request: request.clone(),
            outcome: outcome.clone(),
        });
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Message, RoleConfig};

    fn req(text: &str, stage: Stage) -> ModelRequest {
        ModelRequest::new("m", vec![Message::user(text)], RoleConfig::auxiliary_default().sampling, stage).unwrap()
    }

    #[test]
    fn substring_match_and_exhaustion() {
        let b = ScriptedBackend::matching(vec![ScriptEntry::text(Matcher::contains("solve"), "P1")]).unwrap();
        assert_eq!(b.complete(&req("please solve", Stage::Solving)).unwrap().text, "P1");
        assert!(matches!(
            b.complete(&req("please solve", Stage::Solving)),
            Err(GatewayError::ScriptExhausted { call: 1 })
        ));

        let p = ScriptedBackend::positional(vec![ScriptedReply::Text("only".into())]);
        p.complete(&req("a", Stage::Solving)).unwrap();
        assert!(matches!(p.complete(&req("a", Stage::Solving)), Err(GatewayError::ScriptExhausted { .. })));
    }

    #[test]
    fn unmatched_and_ordering() {
        let b = ScriptedBackend::matching(vec![
            ScriptEntry::text(Matcher::contains("x").stage(Stage::Solving), "first"),
            ScriptEntry::text(Matcher::contains("x").stage(Stage::Solving), "second"),
            ScriptEntry::text(Matcher::contains("cap").stage(Stage::Captioning), "caption").repeating(),
        ])
        .unwrap();
        assert!(matches!(b.complete(&req("zzz", Stage::Solving)), Err(GatewayError::UnmatchedRequest { .. })));
        assert_eq!(b.complete(&req("x", Stage::Solving)).unwrap().text, "first");
        assert_eq!(b.complete(&req("cap", Stage::Captioning)).unwrap().text, "caption");
        assert_eq!(b.complete(&req("cap", Stage::Captioning)).unwrap().text, "caption");
        assert_eq!(b.complete(&req("x", Stage::Solving)).unwrap().text, "second");
        assert_eq!(b.unconsumed(), 0);
        assert_eq!(b.transcript().len(), 5);
    }

    #[test]
    fn script_file_roundtrip() {
        let raw = r#"{"mode":"matching","entries":[
            {"match":{"stage":"solving","contains":["grid"]},"text":"ok"},
            {"match":{},"error":"rate_limited","repeat":true}
        ]}"#;
        let f: ScriptFile = serde_json::from_str(raw).unwrap();
        let b = f.into_backend().unwrap();
        assert_eq!(b.complete(&req("grid", Stage::Solving)).unwrap().text, "ok");
        assert!(matches!(b.complete(&req("grid", Stage::Solving)), Err(GatewayError::RateLimited(_))));
        let bad = r#"{"mode":"matching","entries":[{"match":{},"text":"a","error":"auth"}]}"#;
        assert!(serde_json::from_str::<ScriptFile>(bad).unwrap().into_backend().is_err());
    }
}
