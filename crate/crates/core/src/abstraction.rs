//! Memory writes: turning a verified solution into new or revised concepts.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::Clock;
use crate::exchange::{ask_parsed, conversation, require_block, PipelineError};
use crate::gateway::{Gateway, ModelRole, Stage, Usage};
use crate::grid::Puzzle;
use crate::prompts::{self, render_puzzle};
use crate::sandbox::Executor;
use crate::solver::{verify_on_train, AttemptResult};
use crate::store::{Concept, ConceptId, MemoryFormat, MemoryStore, OeConcept, PsConcept};

/// Most additions accepted from one abstraction reply.
pub const MAX_ADDITIONS_PER_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionOrigin {
    Seed,
    SelfGenerated,
}

/// A program known to reproduce every train pair of its puzzle. The only
/// constructors check this, so unverified programs cannot reach memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedSolution {
    puzzle_id: String,
    program_source: String,
    origin: SolutionOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("solution for {puzzle_id} did not pass every train pair")]
pub struct NotVerified {
    pub puzzle_id: String,
}

impl VerifiedSolution {
    pub fn from_attempt(attempt: &AttemptResult) -> Result<Self, NotVerified> {
        if !(attempt.verified && attempt.all_train_pass()) {
            return Err(NotVerified {
                puzzle_id: attempt.puzzle_id.clone(),
            });
        }
        Ok(Self {
            puzzle_id: attempt.puzzle_id.clone(),
            program_source: attempt.program_source.clone(),
            origin: SolutionOrigin::SelfGenerated,
        })
    }

    /// Runs a hand-written solution on the train pairs before accepting it.
    pub fn verify_seed(puzzle: &Puzzle, program: &str, executor: &dyn Executor) -> Result<Self, PipelineError> {
        let outcomes = verify_on_train(program, puzzle, executor)?;
        if let Some(i) = outcomes.iter().position(|o| !o.is_pass()) {
            return Err(PipelineError::IntegrityFailure(format!(
                "seed program for {} fails train pair {}",
                puzzle.id,
                i + 1
            )));
        }
        Ok(Self {
            puzzle_id: puzzle.id.clone(),
            program_source: program.to_string(),
            origin: SolutionOrigin::Seed,
        })
    }

    pub fn puzzle_id(&self) -> &str {
        &self.puzzle_id
    }

    pub fn program_source(&self) -> &str {
        &self.program_source
    }

    pub fn origin(&self) -> SolutionOrigin {
        self.origin
    }

    pub fn passed_all_train(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Observation,
    Thought,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derivation {
    pub steps: Vec<(StepKind, String)>,
}

impl Derivation {
    /// Parses `OBS:` / `THOUGHT:` lines; other non-blank lines continue the
    /// previous step.
    pub fn parse(body: &str) -> Result<Self, String> {
        let mut steps: Vec<(StepKind, String)> = Vec::new();
        for line in body.lines() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let tagged = [("OBS:", StepKind::Observation), ("THOUGHT:", StepKind::Thought)]
                .into_iter()
                .find_map(|(tag, kind)| t.strip_prefix(tag).map(|rest| (kind, rest.trim().to_string())));
            match (tagged, steps.last_mut()) {
                (Some(step), _) => steps.push(step),
                (None, Some(last)) => {
                    last.1.push(' ');
                    last.1.push_str(t);
                }
                (None, None) => return Err(format!("derivation starts with an untagged line: {t:?}")),
            }
        }
        match steps.first() {
            None => Err("derivation has no steps".into()),
            Some((StepKind::Thought, _)) => Err("derivation must start with an OBS step".into()),
            Some(_) => Ok(Self { steps }),
        }
    }

    pub fn render(&self) -> String {
        self.steps
            .iter()
            .map(|(k, t)| match k {
                StepKind::Observation => format!("OBS: {t}"),
                StepKind::Thought => format!("THOUGHT: {t}"),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteBatch {
    pub source_puzzle_id: String,
    pub additions: Vec<Concept>,
    pub revisions: Vec<(ConceptId, Concept)>,
    /// Entries dropped during validation, with reasons.
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

pub fn oe_derive(gateway: &Gateway, puzzle: &Puzzle, solution: &VerifiedSolution) -> Result<(Derivation, Usage), PipelineError> {
    let prompt = prompts::render(
        "oe_derive",
        &[("puzzle", &render_puzzle(puzzle)), ("program", solution.program_source().trim_end())],
    );
    let parsed = ask_parsed(gateway, ModelRole::Auxiliary, Stage::Abstraction, conversation(prompt), |t| {
        Derivation::parse(&require_block(t, "derivation")?)
    })?;
    Ok((parsed.value, parsed.usage))
}

#[derive(Deserialize)]
struct RawOe {
    #[serde(default)]
    situation: String,
    #[serde(default)]
    suggestion: String,
}

fn parse_oe_entries(text: &str) -> Result<Vec<RawOe>, String> {
    let body = require_block(text, "json")?;
    serde_json::from_str(&body).map_err(|e| format!("expected a JSON array of situation/suggestion objects: {e}"))
}

pub fn oe_extract(
    gateway: &Gateway,
    puzzle: &Puzzle,
    solution: &VerifiedSolution,
    derivation: &Derivation,
) -> Result<(WriteBatch, Usage), PipelineError> {
    let prompt = prompts::render(
        "oe_extract",
        &[
            ("puzzle", &render_puzzle(puzzle)),
            ("program", solution.program_source().trim_end()),
            ("derivation", &derivation.render()),
        ],
    );
    let parsed = ask_parsed(gateway, ModelRole::Auxiliary, Stage::Abstraction, conversation(prompt), parse_oe_entries)?;
    let mut batch = WriteBatch {
        source_puzzle_id: solution.puzzle_id().to_string(),
        additions: Vec::new(),
        revisions: Vec::new(),
        diagnostics: Vec::new(),
    };
    for (i, raw) in parsed.value.into_iter().enumerate() {
        let concept = Concept::Oe(OeConcept {
            situation: raw.situation.trim().to_string(),
            suggestion: raw.suggestion.trim().to_string(),
        });
        match concept.validate_shape() {
            Ok(()) => batch.additions.push(concept),
            Err(e) => batch.diagnostics.push(format!("entry {i} rejected: {e}")),
        }
    }
    if batch.additions.is_empty() {
        return Err(PipelineError::EmptyExtraction);
    }
    Ok((batch, parsed.usage))
}

pub fn ps_pseudocode(gateway: &Gateway, solution: &VerifiedSolution) -> Result<(String, Usage), PipelineError> {
    let prompt = prompts::render("ps_pseudocode", &[("program", solution.program_source().trim_end())]);
    let parsed = ask_parsed(gateway, ModelRole::Auxiliary, Stage::Abstraction, conversation(prompt), |t| {
        let body = require_block(t, "pseudocode")?;
        if body.trim().is_empty() {
            return Err("the pseudocode block is empty".into());
        }
        Ok(body)
    })?;
    Ok((parsed.value, parsed.usage))
}

#[derive(Deserialize)]
struct RawRevision {
    id: u64,
    concept: Value,
}

#[derive(Deserialize)]
struct RawBatch {
    #[serde(default)]
    additions: Vec<Value>,
    #[serde(default)]
    revisions: Vec<RawRevision>,
}

fn parse_ps_raw(text: &str) -> Result<RawBatch, String> {
    let body = require_block(text, "json")?;
    serde_json::from_str(&body).map_err(|e| format!("expected {{\"additions\": [...], \"revisions\": [...]}}: {e}"))
}

fn key(title: &str) -> String {
    title.trim().to_lowercase()
}

/// Removes additions whose references resolve neither in the store nor among
/// the remaining additions, repeating until nothing changes.
fn drop_dangling(store: &MemoryStore, additions: &mut Vec<PsConcept>, diagnostics: &mut Vec<String>) {
    loop {
        let titles: BTreeSet<String> = additions.iter().map(|c| key(&c.title)).collect();
        let before = additions.len();
        additions.retain(|c| {
            let missing: Vec<String> = c
                .referenced_titles()
                .into_iter()
                .filter(|r| store.resolve_title(r).is_none() && !titles.contains(&key(r)))
                .collect();
            if !missing.is_empty() {
                diagnostics.push(format!("addition {:?} rejected: unknown references {missing:?}", c.title));
            }
            missing.is_empty()
        });
        if additions.len() == before {
            break;
        }
    }
}

/// Keeps the entries of `raw` that would leave `store` consistent.
pub fn validate_ps_batch(store: &MemoryStore, raw: RawPsBatch, source_puzzle_id: &str) -> WriteBatch {
    let mut diagnostics = Vec::new();
    let mut additions: Vec<PsConcept> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, value) in raw.additions.into_iter().enumerate() {
        let c: PsConcept = match serde_json::from_value(value) {
            Ok(c) => c,
            Err(e) => {
                diagnostics.push(format!("addition {i} malformed: {e}"));
                continue;
            }
        };
        if let Err(e) = Concept::Ps(c.clone()).validate_shape() {
            diagnostics.push(format!("addition {:?} rejected: {e}", c.title));
            continue;
        }
        if store.resolve_title(&c.title).is_some() || !seen.insert(key(&c.title)) {
            diagnostics.push(format!("addition {:?} rejected: duplicate title", c.title));
            continue;
        }
        additions.push(c);
    }
    drop_dangling(store, &mut additions, &mut diagnostics);
    if additions.len() > MAX_ADDITIONS_PER_BATCH {
        for c in additions.drain(MAX_ADDITIONS_PER_BATCH..) {
            diagnostics.push(format!("addition {:?} dropped: batch cap of {MAX_ADDITIONS_PER_BATCH}", c.title));
        }
        drop_dangling(store, &mut additions, &mut diagnostics);
    }
    let titles: BTreeSet<String> = additions.iter().map(|c| key(&c.title)).collect();
    let mut revisions = Vec::new();
    let mut revised = BTreeSet::new();
    for (raw_id, raw_concept) in raw.revisions {
        let id = ConceptId(raw_id);
        let Some(current) = store.get(id).and_then(|e| e.concept.as_ps()) else {
            diagnostics.push(format!("revision of unknown concept {id} rejected"));
            continue;
        };
        let c: PsConcept = match serde_json::from_value(raw_concept) {
            Ok(c) => c,
            Err(e) => {
                diagnostics.push(format!("revision of {id} malformed: {e}"));
                continue;
            }
        };
        let problem = if let Err(e) = Concept::Ps(c.clone()).validate_shape() {
            Some(e.to_string())
        } else if key(&c.title) != key(&current.title) {
            Some(format!("title change {:?} -> {:?}", current.title, c.title))
        } else if c.kind != current.kind {
            Some(format!("kind change {} -> {}", current.kind, c.kind))
        } else if !revised.insert(id) {
            Some("revised twice in one batch".into())
        } else {
            let missing: Vec<String> = c
                .referenced_titles()
                .into_iter()
                .filter(|t| store.resolve_title(t).is_none() && !titles.contains(&key(t)))
                .collect();
            (!missing.is_empty()).then(|| format!("unknown references {missing:?}"))
        };
        match problem {
            Some(p) => diagnostics.push(format!("revision of {id} rejected: {p}")),
            None => revisions.push((id, Concept::Ps(c))),
        }
    }
    WriteBatch {
        source_puzzle_id: source_puzzle_id.to_string(),
        additions: additions.into_iter().map(Concept::Ps).collect(),
        revisions,
        diagnostics,
    }
}

/// Unvalidated abstraction reply.
pub struct RawPsBatch {
    pub additions: Vec<Value>,
    pub revisions: Vec<(u64, Value)>,
}

impl From<RawBatch> for RawPsBatch {
    fn from(r: RawBatch) -> Self {
        Self {
            additions: r.additions,
            revisions: r.revisions.into_iter().map(|r| (r.id, r.concept)).collect(),
        }
    }
}

pub fn ps_abstract_prompt(pseudocode: &str, store: &MemoryStore) -> Result<String, PipelineError> {
    let library = store.render_compressed()?;
    let library = if library.trim().is_empty() { "(empty)".to_string() } else { library };
    Ok(prompts::render(
        "ps_abstract",
        &[
            ("library", &library),
            ("pseudocode", pseudocode),
            ("cap", &MAX_ADDITIONS_PER_BATCH.to_string()),
        ],
    ))
}

pub fn ps_abstract(
    gateway: &Gateway,
    pseudocode: &str,
    store: &MemoryStore,
    source_puzzle_id: &str,
) -> Result<(WriteBatch, Usage), PipelineError> {
    let prompt = ps_abstract_prompt(pseudocode, store)?;
    // Parse failures and batches with nothing usable both get the one repair.
    let parsed = ask_parsed(gateway, ModelRole::Auxiliary, Stage::Abstraction, conversation(prompt), |t| {
        let raw = parse_ps_raw(t)?;
        let offered = raw.additions.len() + raw.revisions.len();
        let batch = validate_ps_batch(store, raw.into(), source_puzzle_id);
        if offered > 0 && batch.additions.is_empty() && batch.revisions.is_empty() {
            return Err(format!("every entry was rejected: {}", batch.diagnostics.join("; ")));
        }
        Ok(batch)
    });
    match parsed {
        Ok(p) if p.value.additions.is_empty() && p.value.revisions.is_empty() => Err(PipelineError::EmptyBatch),
        Ok(p) => {
            for d in &p.value.diagnostics {
                log::warn!("{source_puzzle_id}: {d}");
            }
            Ok((p.value, p.usage))
        }
        Err(PipelineError::UnparseableOutput(m)) if m.starts_with("every entry was rejected") => {
            Err(PipelineError::IntegrityFailure(m))
        }
        Err(e) => Err(e),
    }
}

/// Applies a batch to a copy of `store` and returns the copy. Additions are
/// inserted in dependency order so batch-internal references resolve.
pub fn apply_batch(
    store: &MemoryStore,
    batch: &WriteBatch,
    clock: &dyn Clock,
) -> Result<(MemoryStore, Vec<ConceptId>, Vec<ConceptId>), PipelineError> {
    let mut next = store.clone();
    let mut pending: Vec<&Concept> = batch.additions.iter().collect();
    let mut added = Vec::new();
    while !pending.is_empty() {
        let before = pending.len();
        let mut rest = Vec::new();
        for c in pending {
            let ready = c
                .as_ps()
                .map(|p| p.referenced_titles().iter().all(|t| next.resolve_title(t).is_some()))
                .unwrap_or(true);
            if ready {
                added.push(next.add_concept(c.clone(), &batch.source_puzzle_id, clock.now())?);
            } else {
                rest.push(c);
            }
        }
        if rest.len() == before {
            return Err(PipelineError::IntegrityFailure(
                "batch additions have unresolvable references".into(),
            ));
        }
        pending = rest;
    }
    let mut revised = Vec::new();
    for (id, c) in &batch.revisions {
        next.revise_concept(*id, c.clone(), &batch.source_puzzle_id)?;
        revised.push(*id);
    }
    next.check_integrity()?;
    Ok((next, added, revised))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteSummary {
    pub puzzle_id: String,
    pub added: Vec<ConceptId>,
    pub revised: Vec<ConceptId>,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// Where a write is persisted, if anywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct WriteTargets<'a> {
    pub store_path: Option<&'a Path>,
    pub audit_log: Option<&'a Path>,
}

pub fn mem_write(
    store: &mut MemoryStore,
    puzzle: &Puzzle,
    solution: &VerifiedSolution,
    gateway: &Gateway,
    clock: &dyn Clock,
    targets: WriteTargets<'_>,
) -> Result<WriteSummary, PipelineError> {
    let blind = puzzle.blind();
    let (batch, usage) = match store.format() {
        MemoryFormat::Oe => {
            let (derivation, mut usage) = oe_derive(gateway, &blind, solution)?;
            let (batch, u) = oe_extract(gateway, &blind, solution, &derivation)?;
            usage.add(&u);
            (batch, usage)
        }
        MemoryFormat::Ps => {
            let (pseudocode, mut usage) = ps_pseudocode(gateway, solution)?;
            let (batch, u) = ps_abstract(gateway, &pseudocode, store, solution.puzzle_id())?;
            usage.add(&u);
            (batch, usage)
        }
    };
    let (next, added, revised) = apply_batch(store, &batch, clock)?;
    if let Some(path) = targets.store_path {
        next.save(path)?;
    }
    *store = next;
    let summary = WriteSummary {
        puzzle_id: solution.puzzle_id().to_string(),
        added,
        revised,
        usage,
        diagnostics: batch.diagnostics,
    };
    if let Some(path) = targets.audit_log {
        append_json_line(path, &summary).map_err(PipelineError::Store)?;
    }
    Ok(summary)
}

pub(crate) fn append_json_line(path: &Path, value: &impl Serialize) -> Result<(), String> {
    let line = serde_json::to_string(value).map_err(|e| e.to_string())?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    writeln!(f, "{line}").map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SteppingClock;
    use crate::gateway::{ScriptedBackend, ScriptedReply};
    use crate::grid::{ExamplePair, Grid, TestCase};
    use crate::solver::{TestPrediction, TrainOutcome};
    use serde_json::json;
    use std::sync::Arc;

    fn attempt(outcomes: Vec<TrainOutcome>, verified: bool) -> AttemptResult {
        AttemptResult {
            puzzle_id: "p".into(),
            sample: 0,
            retry_index: 0,
            program_source: "def transform(g): return g".into(),
            error: None,
            train_results: outcomes,
            test_predictions: vec![TestPrediction::Error { message: "x".into() }],
            verified,
            usage: Usage::default(),
        }
    }

    #[test]
    fn unverified_attempts_cannot_become_solutions() {
        let wrong = TrainOutcome::WrongOutput {
            actual: Grid::new(vec![vec![1]]).unwrap(),
        };
        assert!(VerifiedSolution::from_attempt(&attempt(vec![TrainOutcome::Pass, wrong.clone()], false)).is_err());
        // A forged flag is not enough.
        assert!(VerifiedSolution::from_attempt(&attempt(vec![wrong], true)).is_err());
        assert!(VerifiedSolution::from_attempt(&attempt(vec![], true)).is_err());
        let ok = VerifiedSolution::from_attempt(&attempt(vec![TrainOutcome::Pass], true)).unwrap();
        assert_eq!(ok.origin(), SolutionOrigin::SelfGenerated);
    }

    #[test]
    fn derivation_parsing() {
        let d = Derivation::parse("OBS: a\nTHOUGHT: b\n  more\n\nOBS: c").unwrap();
        assert_eq!(d.steps.len(), 3);
        assert_eq!(d.steps[1], (StepKind::Thought, "b more".into()));
        assert!(Derivation::parse("THOUGHT: only").is_err());
        assert!(Derivation::parse("").is_err());
        assert!(Derivation::parse("hello\nOBS: x").is_err());
    }

    fn ps(title: &str, kind: &str, params: Value, output: Option<&str>) -> Value {
        let mut v = json!({"title": title, "description": "d", "kind": kind, "parameters": params,
                           "relevance_cues": ["cue"], "implementation_notes": []});
        if let Some(o) = output {
            v["output_typing"] = json!(o);
        }
        v
    }

    #[test]
    fn batch_validation_drops_dangling_and_overflow() {
        let store = MemoryStore::new(MemoryFormat::Ps);
        let mut additions = vec![
            ps("object", "type", json!([]), None),
            ps("bad", "routine", json!([{"name": "x", "description": "", "type_annotation": "{ghost}"}]), Some("int")),
            ps("chain", "routine", json!([{"name": "x", "description": "", "type_annotation": "{bad}"}]), Some("int")),
        ];
        for i in 0..10 {
            additions.push(ps(&format!("t{i}"), "type", json!([]), None));
        }
        let batch = validate_ps_batch(&store, RawPsBatch { additions, revisions: vec![] }, "p");
        let titles: Vec<&str> = batch.additions.iter().map(|c| c.as_ps().unwrap().title.as_str()).collect();
        // dangling "bad" takes "chain" with it; the cap then keeps the first 8 survivors
        assert_eq!(titles, vec!["object", "t0", "t1", "t2", "t3", "t4", "t5", "t6"]);
        assert!(batch.diagnostics.iter().any(|d| d.contains("ghost")));
        assert!(batch.diagnostics.iter().any(|d| d.contains("batch cap")));
    }

    #[test]
    fn failed_write_leaves_store_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        let mut store = MemoryStore::new(MemoryFormat::Ps);
        store.save(&path).unwrap();
        let before = std::fs::read(&path).unwrap();
        let backend = Arc::new(ScriptedBackend::positional(vec![
            ScriptedReply::Text("```pseudocode\nfind objects\n```".into()),
            ScriptedReply::Text("```json\n{\"additions\": [], \"revisions\": []}\n```".into()),
            ScriptedReply::Text("```json\n{\"additions\": [], \"revisions\": []}\n```".into()),
        ]));
        let gw = Gateway::single(backend);
        let p = Puzzle::new(
            "p",
            vec![ExamplePair {
                input: Grid::new(vec![vec![1]]).unwrap(),
                output: Grid::new(vec![vec![1]]).unwrap(),
            }],
            vec![TestCase {
                input: Grid::new(vec![vec![2]]).unwrap(),
                expected: None,
            }],
        )
        .unwrap();
        let sol = VerifiedSolution::from_attempt(&attempt(vec![TrainOutcome::Pass], true)).unwrap();
        let err = mem_write(
            &mut store,
            &p,
            &sol,
            &gw,
            &SteppingClock::default(),
            WriteTargets {
                store_path: Some(&path),
                audit_log: None,
            },
        )
        .unwrap_err();
        assert_eq!(err, PipelineError::EmptyBatch);
        assert!(store.is_empty());
        assert_eq!(std::fs::read(&path).unwrap(), before);
    }
}
