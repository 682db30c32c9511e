//! Memory reads: choosing which concepts go into the solver prompt.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::exchange::{ask_parsed, conversation, fenced_blocks, require_block, PipelineError};
use crate::gateway::{Gateway, ModelRole, Stage, Usage};
use crate::grid::Puzzle;
use crate::prompts::{self, render_puzzle};
use crate::store::{ConceptId, MemoryFormat, MemoryStore, Snapshot};

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    OeTopk,
    PsReasoning,
    All,
    None,
}

impl SelectionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionStrategy::OeTopk => "oe_topk",
            SelectionStrategy::PsReasoning => "ps_reasoning",
            SelectionStrategy::All => "all",
            SelectionStrategy::None => "none",
        }
    }

    pub fn compatible_with(self, format: MemoryFormat) -> bool {
        match self {
            SelectionStrategy::OeTopk => format == MemoryFormat::Oe,
            SelectionStrategy::PsReasoning => format == MemoryFormat::Ps,
            SelectionStrategy::All | SelectionStrategy::None => true,
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oe_topk" => Ok(Self::OeTopk),
            "ps_reasoning" => Ok(Self::PsReasoning),
            "all" => Ok(Self::All),
            "none" => Ok(Self::None),
            other => Err(format!("unknown selection strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PuzzleCaption {
    pub observations: Vec<String>,
    pub speculations: Vec<String>,
}

impl PuzzleCaption {
    pub fn parse(body: &str) -> Result<Self, String> {
        #[derive(PartialEq)]
        enum Section {
            Start,
            Observations,
            Speculations,
        }
        let mut section = Section::Start;
        let (mut observations, mut speculations) = (Vec::new(), Vec::new());
        for line in body.lines() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            match t.to_ascii_uppercase().as_str() {
                "OBSERVATIONS:" => {
                    section = Section::Observations;
                    continue;
                }
                "SPECULATIONS:" => {
                    section = Section::Speculations;
                    continue;
                }
                _ => {}
            }
            let item = t.trim_start_matches(['-', '*']).trim().to_string();
            match section {
                Section::Start => return Err(format!("text before the OBSERVATIONS section: {t:?}")),
                Section::Observations => observations.push(item),
                Section::Speculations => speculations.push(item),
            }
        }
        if observations.is_empty() {
            return Err("the caption has no observations".into());
        }
        Ok(Self {
            observations,
            speculations,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::from("Observations:\n");
        for o in &self.observations {
            out.push_str(&format!("- {o}\n"));
        }
        out.push_str("Speculations:\n");
        for s in &self.speculations {
            out.push_str(&format!("- {s}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub ids: Vec<ConceptId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub strategy: SelectionStrategy,
    pub store_snapshot_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<PuzzleCaption>,
    /// Ids the model named that were unknown or repeated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<u64>,
    pub usage: Usage,
}

/// Parses a comma/space separated id list, tolerating brackets and `#`.
pub fn parse_id_list(body: &str) -> Result<Vec<u64>, String> {
    body.split(|c: char| c == ',' || c.is_whitespace())
        .map(|t| t.trim_matches(|c| matches!(c, '[' | ']' | '#' | '(' | ')')))
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u64>().map_err(|_| format!("{t:?} is not a concept number")))
        .collect()
}

/// Keeps ids that exist in `store`, first occurrence only, up to `limit`.
fn validate_ids(raw: Vec<u64>, store: &MemoryStore, limit: Option<usize>) -> (Vec<ConceptId>, Vec<u64>) {
    let mut seen = BTreeSet::new();
    let mut ids = Vec::new();
    let mut dropped = Vec::new();
    for n in raw {
        let id = ConceptId(n);
        if store.contains(id) && seen.insert(id) {
            ids.push(id);
        } else {
            dropped.push(n);
        }
    }
    if let Some(k) = limit {
        ids.truncate(k);
    }
    (ids, dropped)
}

pub fn caption_prompt(puzzle: &Puzzle) -> String {
    prompts::render("caption", &[("puzzle", &render_puzzle(&puzzle.blind()))])
}

pub fn caption_puzzle(gateway: &Gateway, puzzle: &Puzzle) -> Result<(PuzzleCaption, Usage), PipelineError> {
    let parsed = ask_parsed(
        gateway,
        ModelRole::Auxiliary,
        Stage::Captioning,
        conversation(caption_prompt(puzzle)),
        |t| PuzzleCaption::parse(&require_block(t, "caption")?),
    )?;
    Ok((parsed.value, parsed.usage))
}

fn mismatch(strategy: SelectionStrategy, store: &MemoryStore) -> PipelineError {
    PipelineError::StrategyFormatMismatch {
        strategy: strategy.to_string(),
        format: store.format().to_string(),
    }
}

pub fn oe_select(
    gateway: &Gateway,
    caption: &PuzzleCaption,
    snapshot: &Snapshot,
    k: usize,
) -> Result<SelectionResult, PipelineError> {
    let store = &snapshot.store;
    if store.format() != MemoryFormat::Oe {
        return Err(mismatch(SelectionStrategy::OeTopk, store));
    }
    let k = k.max(1);
    let prompt = prompts::render(
        "oe_select",
        &[
            ("k", &k.to_string()),
            ("caption", caption.render().trim_end()),
            ("entries", &store.render_full(None)?),
        ],
    );
    let parsed = ask_parsed(gateway, ModelRole::Auxiliary, Stage::Selection, conversation(prompt), |t| {
        parse_id_list(&require_block(t, "selection")?)
    })?;
    let (ids, dropped) = validate_ids(parsed.value, store, Some(k));
    Ok(SelectionResult {
        ids,
        rationale: None,
        strategy: SelectionStrategy::OeTopk,
        store_snapshot_label: snapshot.label.as_str().to_string(),
        caption: Some(caption.clone()),
        dropped,
        usage: parsed.usage,
    })
}

pub fn ps_select_prompt(puzzle: &Puzzle, store: &MemoryStore) -> Result<String, PipelineError> {
    Ok(prompts::render(
        "ps_select",
        &[("puzzle", &render_puzzle(&puzzle.blind())), ("catalog", &store.render_catalog()?)],
    ))
}

pub fn ps_select(gateway: &Gateway, puzzle: &Puzzle, snapshot: &Snapshot) -> Result<SelectionResult, PipelineError> {
    let store = &snapshot.store;
    if store.format() != MemoryFormat::Ps {
        return Err(mismatch(SelectionStrategy::PsReasoning, store));
    }
    let prompt = ps_select_prompt(puzzle, store)?;
    let parsed = ask_parsed(gateway, ModelRole::Reasoner, Stage::Selection, conversation(prompt), |t| {
        parse_id_list(&require_block(t, "selection")?)
    })?;
    let (ids, dropped) = validate_ids(parsed.value, store, None);
    if ids.is_empty() {
        log::info!("{}: reasoning-based selection chose no concepts", puzzle.id);
    }
    Ok(SelectionResult {
        ids,
        rationale: rationale_text(&parsed.text),
        strategy: SelectionStrategy::PsReasoning,
        store_snapshot_label: snapshot.label.as_str().to_string(),
        caption: None,
        dropped,
        usage: parsed.usage,
    })
}

/// Reply text with fenced blocks removed.
fn rationale_text(text: &str) -> Option<String> {
    let mut out = String::new();
    let mut in_block = false;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            in_block = !in_block;
            continue;
        }
        if !in_block {
            out.push_str(line);
            out.push('\n');
        }
    }
    let out = out.trim().to_string();
    debug_assert!(fenced_blocks(&out).is_empty());
    (!out.is_empty()).then_some(out)
}

pub fn select(
    strategy: SelectionStrategy,
    puzzle: &Puzzle,
    snapshot: &Snapshot,
    k: usize,
    gateway: &Gateway,
) -> Result<SelectionResult, PipelineError> {
    let store = &snapshot.store;
    if !strategy.compatible_with(store.format()) {
        return Err(mismatch(strategy, store));
    }
    let fixed = |ids: Vec<ConceptId>| SelectionResult {
        ids,
        rationale: None,
        strategy,
        store_snapshot_label: snapshot.label.as_str().to_string(),
        caption: None,
        dropped: Vec::new(),
        usage: Usage::default(),
    };
    match strategy {
        SelectionStrategy::All => Ok(fixed(store.ids())),
        SelectionStrategy::None => Ok(fixed(Vec::new())),
        SelectionStrategy::OeTopk => {
            let (caption, usage) = caption_puzzle(gateway, puzzle)?;
            let mut result = oe_select(gateway, &caption, snapshot, k)?;
            result.usage.add(&usage);
            Ok(result)
        }
        SelectionStrategy::PsReasoning => ps_select(gateway, puzzle, snapshot),
    }
}
