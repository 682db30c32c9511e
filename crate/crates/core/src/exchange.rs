//! Structured model exchanges: fenced-block parsing and the single repair
//! reprompt shared by every pipeline stage that expects a fixed grammar.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, Message, ModelRole, Stage, Usage};
use crate::prompts;
use crate::sandbox::SandboxError;
use crate::store::StoreError;

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum PipelineError {
    #[error("model output could not be parsed: {0}")]
    UnparseableOutput(String),
    #[error("model call failed: {0}")]
    ModelFailure(#[from] GatewayError),
    #[error("extraction produced no usable entries")]
    EmptyExtraction,
    #[error("abstraction produced an empty batch")]
    EmptyBatch,
    #[error("batch failed integrity checks: {0}")]
    IntegrityFailure(String),
    #[error("strategy {strategy} cannot read a {format} store")]
    StrategyFormatMismatch { strategy: String, format: String },
    #[error("no program found in response")]
    NoProgramFound,
    #[error("sandbox unavailable: {0}")]
    SandboxUnavailable(String),
    #[error("store error: {0}")]
    Store(String),
}

impl From<StoreError> for PipelineError {
    fn from(e: StoreError) -> Self {
        PipelineError::Store(e.to_string())
    }
}

impl From<SandboxError> for PipelineError {
    fn from(e: SandboxError) -> Self {
        PipelineError::SandboxUnavailable(e.to_string())
    }
}

/// A fenced block: the info string after the opening fence and its body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock {
    pub tag: String,
    pub body: String,
}

/// All complete ``` fenced blocks in order of appearance. An unterminated
/// trailing block is ignored.
pub fn fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match current.take() {
            None => {
                if let Some(info) = trimmed.strip_prefix("```") {
                    current = Some((info.trim().to_string(), Vec::new()));
                }
            }
            Some((tag, mut body)) => {
                if trimmed.trim_end() == "```" {
                    blocks.push(FencedBlock {
                        tag,
                        body: body.join("\n"),
                    });
                } else {
                    body.push(line);
                    current = Some((tag, body));
                }
            }
        }
    }
    blocks
}

/// Body of the last block whose tag equals `tag` (case-insensitive).
pub fn last_block(text: &str, tag: &str) -> Option<String> {
    fenced_blocks(text)
        .into_iter()
        .rev()
        .find(|b| b.tag.eq_ignore_ascii_case(tag))
        .map(|b| b.body)
}

pub fn require_block(text: &str, tag: &str) -> Result<String, String> {
    last_block(text, tag).ok_or_else(|| format!("no ```{tag} block found"))
}

/// Outcome of a parsed exchange.
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub value: T,
    pub usage: Usage,
    /// Raw text of the reply that parsed.
    pub text: String,
}

/// Sends `messages`, parses the reply, and on a parse failure asks once more
/// within the same conversation.
pub fn ask_parsed<T>(
    gateway: &Gateway,
    role: ModelRole,
    stage: Stage,
    mut messages: Vec<Message>,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<Parsed<T>, PipelineError> {
    let first = gateway.complete(role, stage, messages.clone())?;
    let mut usage = first.usage;
    let err = match parse(&first.text) {
        Ok(value) => {
            return Ok(Parsed {
                value,
                usage,
                text: first.text,
            })
        }
        Err(e) => e,
    };
    log::debug!("{stage} reply unparseable ({err}); sending repair prompt");
    messages.push(Message::assistant(first.text));
    messages.push(Message::user(prompts::render("repair", &[("error", &err)])));
    let second = gateway.complete(role, stage, messages)?;
    usage.add(&second.usage);
    match parse(&second.text) {
        Ok(value) => Ok(Parsed {
            value,
            usage,
            text: second.text,
        }),
        Err(e) => Err(PipelineError::UnparseableOutput(e)),
    }
}

/// System message plus one user message.
pub fn conversation(user: String) -> Vec<Message> {
    vec![Message::system(prompts::template("system").trim_end()), Message::user(user)]
}
