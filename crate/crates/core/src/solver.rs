//! Induction: prompt composition, program extraction, train-pair
//! verification and the execution-feedback retry chain.

use serde::{Deserialize, Serialize};

use crate::exchange::{conversation, fenced_blocks, PipelineError};
use crate::gateway::{FinishReason, Gateway, GatewayError, Message, ModelRequest, ModelRole, Stage, Usage};
use crate::grid::{grids_equal, Grid, Puzzle};
use crate::prompts::{self, render_puzzle};
use crate::sandbox::{CaseResult, Executor, ENTRY_NAME};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TrainOutcome {
    Pass,
    WrongOutput { actual: Grid },
    RuntimeError { message: String },
    Timeout,
}

impl TrainOutcome {
    pub fn is_pass(&self) -> bool {
        matches!(self, TrainOutcome::Pass)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestPrediction {
    Grid { grid: Grid },
    Error { message: String },
}

impl TestPrediction {
    pub fn grid(&self) -> Option<&Grid> {
        match self {
            TestPrediction::Grid { grid } => Some(grid),
            TestPrediction::Error { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptResult {
    pub puzzle_id: String,
    /// Index of the independent sample chain this attempt belongs to.
    pub sample: usize,
    pub retry_index: u32,
    pub program_source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub train_results: Vec<TrainOutcome>,
    pub test_predictions: Vec<TestPrediction>,
    pub verified: bool,
    pub usage: Usage,
}

impl AttemptResult {
    /// Verification recomputed from the stored outcomes.
    pub fn all_train_pass(&self) -> bool {
        !self.train_results.is_empty() && self.train_results.iter().all(TrainOutcome::is_pass)
    }
}

/// The candidate a chain contributes for scoring: its verified attempt if
/// any, otherwise its last attempt.
pub fn chain_candidate(chain: &[AttemptResult]) -> Option<&AttemptResult> {
    chain.iter().find(|a| a.verified).or_else(|| chain.last())
}

/// Concept renderings offered to the solver. `compressed` is substituted
/// once if the full rendering overflows the context window.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryContext {
    pub full: String,
    pub compressed: Option<String>,
}

impl MemoryContext {
    pub fn none() -> Self {
        Self::default()
    }
}

pub fn solve_prompt_text(puzzle: &Puzzle, memory_rendering: &str) -> String {
    let memory = if memory_rendering.trim().is_empty() {
        String::new()
    } else {
        prompts::render("solve_memory", &[("concepts", memory_rendering.trim_end())])
    };
    prompts::render(
        "solve",
        &[("memory", &memory), ("puzzle", &render_puzzle(puzzle)), ("entry", ENTRY_NAME)],
    )
}

pub fn compose_solve_prompt(
    gateway: &Gateway,
    puzzle: &Puzzle,
    memory_rendering: &str,
) -> Result<ModelRequest, GatewayError> {
    gateway.request(
        ModelRole::Reasoner,
        Stage::Solving,
        conversation(solve_prompt_text(puzzle, memory_rendering)),
    )
}

/// Contents of the last fenced block.
pub fn extract_program(response_text: &str) -> Result<String, PipelineError> {
    fenced_blocks(response_text)
        .pop()
        .map(|b| b.body)
        .filter(|b| !b.trim().is_empty())
        .ok_or(PipelineError::NoProgramFound)
}

fn train_outcome(result: &CaseResult, expected: &Grid) -> TrainOutcome {
    match result {
        CaseResult::Grid { grid } if grids_equal(grid, expected) => TrainOutcome::Pass,
        CaseResult::Grid { grid } => TrainOutcome::WrongOutput { actual: grid.clone() },
        CaseResult::RuntimeError { message } => TrainOutcome::RuntimeError {
            message: message.clone(),
        },
        CaseResult::InvalidOutput { description } => TrainOutcome::RuntimeError {
            message: format!("invalid output: {description}"),
        },
        CaseResult::Timeout => TrainOutcome::Timeout,
    }
}

fn test_prediction(result: &CaseResult) -> TestPrediction {
    match result {
        CaseResult::Grid { grid } => TestPrediction::Grid { grid: grid.clone() },
        CaseResult::RuntimeError { message } => TestPrediction::Error {
            message: message.clone(),
        },
        CaseResult::InvalidOutput { description } => TestPrediction::Error {
            message: format!("invalid output: {description}"),
        },
        CaseResult::Timeout => TestPrediction::Error {
            message: "timeout".into(),
        },
    }
}

pub fn verify_on_train(
    program: &str,
    puzzle: &Puzzle,
    executor: &dyn Executor,
) -> Result<Vec<TrainOutcome>, PipelineError> {
    let inputs: Vec<Grid> = puzzle.train.iter().map(|p| p.input.clone()).collect();
    let out = executor.run(program, &inputs)?;
    Ok(out
        .cases
        .iter()
        .zip(&puzzle.train)
        .map(|(r, pair)| train_outcome(r, &pair.output))
        .collect())
}

/// Runs the program on train and test inputs in one sandbox call.
fn run_program(
    program: &str,
    puzzle: &Puzzle,
    executor: &dyn Executor,
) -> Result<(Vec<TrainOutcome>, Vec<TestPrediction>), PipelineError> {
    let inputs: Vec<Grid> = puzzle
        .train
        .iter()
        .map(|p| p.input.clone())
        .chain(puzzle.test.iter().map(|t| t.input.clone()))
        .collect();
    let out = executor.run(program, &inputs)?;
    let (train, test) = out.cases.split_at(puzzle.train.len());
    Ok((
        train
            .iter()
            .zip(&puzzle.train)
            .map(|(r, pair)| train_outcome(r, &pair.output))
            .collect(),
        test.iter().map(test_prediction).collect(),
    ))
}

/// Describes every failing train pair. Test cases are never mentioned.
pub fn feedback_message(outcomes: &[TrainOutcome], puzzle: &Puzzle, time_limit_seconds: f64) -> String {
    let mut parts = Vec::new();
    for (i, (outcome, pair)) in outcomes.iter().zip(&puzzle.train).enumerate() {
        let expected = pair.output.render_text();
        let n = i + 1;
        let part = match outcome {
            TrainOutcome::Pass => continue,
            TrainOutcome::WrongOutput { actual } => format!(
                "Example {n}: wrong output.\nExpected:\n{expected}\nActual:\n{}",
                actual.render_text()
            ),
            TrainOutcome::RuntimeError { message } => {
                format!("Example {n}: the program failed.\nError:\n{}\nExpected:\n{expected}", message.trim_end())
            }
            TrainOutcome::Timeout => format!(
                "Example {n}: timeout, the program did not finish within the {time_limit_seconds}s limit.\nExpected:\n{expected}"
            ),
        };
        parts.push(part);
    }
    parts.join("\n\n")
}

fn failed_attempt(puzzle: &Puzzle, sample: usize, retry_index: u32, program: String, error: String, usage: Usage) -> AttemptResult {
    AttemptResult {
        puzzle_id: puzzle.id.clone(),
        sample,
        retry_index,
        program_source: program,
        error: Some(error),
        train_results: Vec::new(),
        test_predictions: vec![
            TestPrediction::Error {
                message: "no program".into()
            };
            puzzle.test.len()
        ],
        verified: false,
        usage,
    }
}

/// One sample's conversation. Each [`AttemptChain::step`] makes one
/// attempt; later attempts see the earlier replies plus execution feedback.
#[derive(Debug, Clone)]
pub struct AttemptChain {
    sample: usize,
    messages: Vec<Message>,
    memory: MemoryContext,
    compressed_used: bool,
    attempts: Vec<AttemptResult>,
}

impl AttemptChain {
    pub fn new(puzzle: &Puzzle, memory: MemoryContext, sample: usize) -> Self {
        Self {
            sample,
            messages: conversation(solve_prompt_text(puzzle, &memory.full)),
            memory,
            compressed_used: false,
            attempts: Vec::new(),
        }
    }

    /// Swaps the concepts offered in the opening prompt, keeping the rest of
    /// the conversation.
    pub fn refresh_memory(&mut self, puzzle: &Puzzle, memory: MemoryContext) {
        self.messages[1] = Message::user(solve_prompt_text(puzzle, &memory.full));
        self.memory = memory;
        self.compressed_used = false;
    }

    pub fn attempts(&self) -> &[AttemptResult] {
        &self.attempts
    }

    pub fn into_attempts(self) -> Vec<AttemptResult> {
        self.attempts
    }

    pub fn is_verified(&self) -> bool {
        self.attempts.iter().any(|a| a.verified)
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn step(&mut self, gateway: &Gateway, executor: &dyn Executor, puzzle: &Puzzle) -> &AttemptResult {
        let retry_index = self.attempts.len() as u32;
        let attempt = self.make_attempt(gateway, executor, puzzle, retry_index);
        self.attempts.push(attempt);
        self.attempts.last().expect("just pushed")
    }

    fn make_attempt(&mut self, gateway: &Gateway, executor: &dyn Executor, puzzle: &Puzzle, retry_index: u32) -> AttemptResult {
        let sample = self.sample;
        let stage = if retry_index == 0 { Stage::Solving } else { Stage::Retry };
        let mut usage = Usage::default();
        let response = loop {
            match gateway.complete(ModelRole::Reasoner, stage, self.messages.clone()) {
                Err(GatewayError::ContextOverflow(m)) if !self.compressed_used && self.memory.compressed.is_some() => {
                    log::warn!("{}: context overflow ({m}); retrying with compressed concepts", puzzle.id);
                    self.compressed_used = true;
                    let text = solve_prompt_text(puzzle, self.memory.compressed.as_deref().unwrap_or(""));
                    self.messages[1] = Message::user(text);
                }
                other => break other,
            }
        };
        let response = match response {
            Ok(r) => r,
            Err(e) => return failed_attempt(puzzle, sample, retry_index, String::new(), e.to_string(), usage),
        };
        usage.add(&response.usage);
        self.messages.push(Message::assistant(response.text.clone()));
        if response.finish_reason == FinishReason::Length {
            self.messages.push(Message::user(prompts::template("truncated").trim_end()));
            return failed_attempt(
                puzzle,
                sample,
                retry_index,
                String::new(),
                "response truncated at the output limit".into(),
                usage,
            );
        }
        let program = match extract_program(&response.text) {
            Ok(p) => p,
            Err(e) => {
                self.messages.push(Message::user(prompts::template("no_program").trim_end()));
                return failed_attempt(puzzle, sample, retry_index, String::new(), e.to_string(), usage);
            }
        };
        match run_program(&program, puzzle, executor) {
            Ok((train_results, test_predictions)) => {
                let verified = train_results.iter().all(TrainOutcome::is_pass);
                if !verified {
                    let f = feedback_message(&train_results, puzzle, executor.limits().wall_clock_seconds);
                    self.messages.push(Message::user(prompts::render("retry", &[("feedback", &f)])));
                }
                AttemptResult {
                    puzzle_id: puzzle.id.clone(),
                    sample,
                    retry_index,
                    program_source: program,
                    error: None,
                    train_results,
                    test_predictions,
                    verified,
                    usage,
                }
            }
            Err(e) => {
                let msg = e.to_string();
                let f = format!("The program could not be executed: {msg}");
                self.messages.push(Message::user(prompts::render("retry", &[("feedback", &f)])));
                failed_attempt(puzzle, sample, retry_index, program, msg, usage)
            }
        }
    }
}

/// One conversation of up to `max_retries + 1` attempts, stopping at the
/// first verified program.
pub fn attempt_puzzle(
    gateway: &Gateway,
    executor: &dyn Executor,
    puzzle: &Puzzle,
    memory: &MemoryContext,
    max_retries: u32,
    sample: usize,
) -> Vec<AttemptResult> {
    let mut chain = AttemptChain::new(puzzle, memory.clone(), sample);
    for _ in 0..=max_retries {
        if chain.step(gateway, executor, puzzle).verified {
            break;
        }
    }
    chain.into_attempts()
}
