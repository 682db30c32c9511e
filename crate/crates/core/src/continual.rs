//! The evaluation loop: read memory, solve, gate on verification, and write
//! verified solutions back at a fixed item interval.
//!
//! Retries are organized as passes over the dataset. Pass 0 makes the first
//! attempt on every item; pass `r` continues the conversation of every item
//! not yet solved. In continual mode selection is redone on each pass
//! against the latest snapshot, so concepts written during an earlier pass
//! can help later ones.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{append_json_line, mem_write, VerifiedSolution, WriteSummary, WriteTargets};
use crate::clock::Clock;
use crate::evaluator::{credit_matrix, oracle_at_k, strict_score, PuzzleScore, RunCredits};
use crate::exchange::PipelineError;
use crate::gateway::{Gateway, UsageLedger};
use crate::grid::{load_puzzle_file, Puzzle};
use crate::prompts;
use crate::sandbox::Executor;
use crate::selection::{select, SelectionResult, SelectionStrategy, DEFAULT_TOP_K};
use crate::solver::{chain_candidate, AttemptChain, AttemptResult, MemoryContext, TestPrediction};
use crate::store::{MemoryFormat, MemoryStore, Snapshot, SnapshotLabel, SnapshotRegistry, StoreError};

pub const DEFAULT_UPDATE_INTERVAL: usize = 10;
pub const SEED_SNAPSHOT: &str = "seed";
pub const SEEDED_SNAPSHOT: &str = "seeded";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    Frozen,
    Continual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetOrdering {
    DatasetOrder,
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    #[serde(default = "default_interval")]
    pub update_interval_k: usize,
    #[serde(default)]
    pub max_retries: u32,
    pub selection_strategy: SelectionStrategy,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    pub memory_mode: MemoryMode,
    #[serde(default = "default_ordering")]
    pub ordering: DatasetOrdering,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub parallel_samples: usize,
    #[serde(default = "one")]
    pub workers: usize,
}

fn default_interval() -> usize {
    DEFAULT_UPDATE_INTERVAL
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_ordering() -> DatasetOrdering {
    DatasetOrdering::DatasetOrder
}

fn one() -> usize {
    1
}

impl LoopConfig {
    pub fn new(selection_strategy: SelectionStrategy, memory_mode: MemoryMode) -> Self {
        Self {
            update_interval_k: DEFAULT_UPDATE_INTERVAL,
            max_retries: 0,
            selection_strategy,
            top_k: DEFAULT_TOP_K,
            memory_mode,
            ordering: DatasetOrdering::DatasetOrder,
            batch_size: 1,
            parallel_samples: 1,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.update_interval_k == 0 {
            return Err("update_interval_k must be at least 1".into());
        }
        if self.top_k == 0 {
            return Err("top_k must be at least 1".into());
        }
        if self.batch_size == 0 || self.parallel_samples == 0 || self.workers == 0 {
            return Err("batch_size, parallel_samples and workers must be at least 1".into());
        }
        if self.memory_mode == MemoryMode::Continual && self.batch_size != 1 {
            return Err("continual memory mode requires batch_size = 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error("invalid loop configuration: {0}")]
    InvalidConfig(String),
    #[error("strategy {strategy} cannot read a {format} store")]
    StrategyFormatMismatch { strategy: SelectionStrategy, format: MemoryFormat },
    #[error("store failure: {0}")]
    Store(#[from] StoreError),
    #[error("seed directory {0} does not exist")]
    SeedDirMissing(PathBuf),
    #[error("io failure: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRef {
    pub sample: usize,
    pub retry_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub verified: bool,
    /// The write candidate when verified, otherwise the latest attempt.
    pub best: Option<AttemptRef>,
}

/// Verification status of an item's attempt chains. Only a verified attempt
/// is ever eligible for writing.
pub fn get_feedback(chains: &[Vec<AttemptResult>]) -> FeedbackSummary {
    let r = |a: &AttemptResult| AttemptRef {
        sample: a.sample,
        retry_index: a.retry_index,
    };
    if let Some(a) = chains.iter().flatten().find(|a| a.verified && a.all_train_pass()) {
        return FeedbackSummary {
            verified: true,
            best: Some(r(a)),
        };
    }
    FeedbackSummary {
        verified: false,
        best: chains.iter().flatten().max_by_key(|a| (a.retry_index, std::cmp::Reverse(a.sample))).map(r),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassSelection {
    pub pass: u32,
    pub selection: SelectionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    /// 1-based position in loop order.
    pub index: usize,
    pub puzzle_id: String,
    pub selections: Vec<PassSelection>,
    pub chains: Vec<Vec<AttemptResult>>,
    pub feedback: FeedbackSummary,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteFailure {
    pub puzzle_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WritePoint {
    pub pass: u32,
    pub after_item: usize,
    pub label: String,
    pub written: Vec<WriteSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<WriteFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub puzzles: Vec<PuzzleScore>,
    pub strict: BTreeMap<String, u8>,
    /// Mean oracle fraction ×100 over scored puzzles.
    pub score: f64,
    pub strict_score: f64,
    /// Per puzzle: test case count and per-candidate credit rows, enough to
    /// recompute pooled scores without the dataset.
    pub credits: RunCredits,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unscored: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub prompt_hashes: BTreeMap<String, String>,
    pub loop_config: LoopConfig,
    pub items: Vec<ItemRecord>,
    pub write_points: Vec<WritePoint>,
    pub snapshot_labels: Vec<String>,
    pub scores: RunScores,
    pub ledger: UsageLedger,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run record serializes");
        s.push('\n');
        s
    }

    /// Per-puzzle candidates (one per sample chain), in item order.
    pub fn candidates(&self) -> Vec<Vec<Vec<TestPrediction>>> {
        self.items
            .iter()
            .map(|item| {
                item.chains
                    .iter()
                    .filter_map(|c| chain_candidate(c))
                    .map(|a| a.test_predictions.clone())
                    .collect()
            })
            .collect()
    }
}

/// Collaborators shared by every item of a run.
pub struct LoopEnv<'a> {
    pub gateway: &'a Gateway,
    pub executor: &'a dyn Executor,
    pub clock: &'a dyn Clock,
    /// Working store file, audit logs and snapshots go here when set.
    pub run_dir: Option<&'a Path>,
}

impl LoopEnv<'_> {
    fn store_path(&self) -> Option<PathBuf> {
        self.run_dir.map(|d| d.join("memory.json"))
    }

    fn audit_path(&self) -> Option<PathBuf> {
        self.run_dir.map(|d| d.join("write-audit.jsonl"))
    }
}

#[derive(Debug, Clone)]
struct ItemState {
    chains: Vec<AttemptChain>,
    selections: Vec<PassSelection>,
    errors: Vec<String>,
    /// Memory offered to the chains, kept for chains created later.
    memory: MemoryContext,
}

impl ItemState {
    fn new() -> Self {
        Self {
            chains: Vec::new(),
            selections: Vec::new(),
            errors: Vec::new(),
            memory: MemoryContext::none(),
        }
    }

    fn solved(&self) -> bool {
        self.chains.iter().any(AttemptChain::is_verified)
    }

    fn verified_attempt(&self) -> Option<&AttemptResult> {
        self.chains.iter().flat_map(|c| c.attempts()).find(|a| a.verified)
    }
}

fn memory_for(selection: &SelectionResult, store: &MemoryStore) -> Result<MemoryContext, StoreError> {
    if selection.ids.is_empty() {
        return Ok(MemoryContext::none());
    }
    let full = store.render_full(Some(&selection.ids))?;
    let compressed = match store.format() {
        MemoryFormat::Ps => Some(store.render_compressed_subset(&selection.ids)?),
        MemoryFormat::Oe => None,
    };
    Ok(MemoryContext { full, compressed })
}

/// One pass over one item: optional (re-)selection, then one attempt per
/// unverified sample chain.
fn run_item_pass(
    state: &mut ItemState,
    puzzle: &Puzzle,
    pass: u32,
    snapshot: &Snapshot,
    reselect: bool,
    config: &LoopConfig,
    env: &LoopEnv<'_>,
) {
    if reselect || state.selections.is_empty() {
        let chosen = select(config.selection_strategy, &puzzle.blind(), snapshot, config.top_k, env.gateway)
            .map_err(|e| e.to_string())
            .and_then(|sel| {
                memory_for(&sel, &snapshot.store)
                    .map(|m| (sel, m))
                    .map_err(|e| e.to_string())
            });
        match chosen {
            Ok((selection, memory)) => {
                let changed = memory != state.memory;
                state.memory = memory;
                state.selections.push(PassSelection { pass, selection });
                if changed {
                    for chain in &mut state.chains {
                        chain.refresh_memory(puzzle, state.memory.clone());
                    }
                }
            }
            Err(e) => {
                log::warn!("{}: selection failed in pass {pass}: {e}", puzzle.id);
                state.errors.push(format!("pass {pass}: selection failed: {e}"));
                if state.selections.is_empty() {
                    return;
                }
            }
        }
    }
    if state.chains.is_empty() {
        state.chains = (0..config.parallel_samples)
            .map(|s| AttemptChain::new(puzzle, state.memory.clone(), s))
            .collect();
    }
    for chain in &mut state.chains {
        if !chain.is_verified() {
            let attempt = chain.step(env.gateway, env.executor, puzzle);
            if let Some(e) = &attempt.error {
                state.errors.push(format!("pass {pass} sample {}: {e}", attempt.sample));
            }
        }
    }
}

fn loop_order(n: usize, ordering: DatasetOrdering) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let DatasetOrdering::Shuffled { seed } = ordering {
        order.shuffle(&mut StdRng::seed_from_u64(seed));
    }
    order
}

fn write_point_label(pass: u32, after_item: usize) -> SnapshotLabel {
    if pass == 0 {
        SnapshotLabel::after_item(after_item)
    } else {
        SnapshotLabel::new(format!("pass{pass}_after_{after_item}")).expect("label characters are valid")
    }
}

pub fn run_loop(
    dataset: &[Puzzle],
    store: &mut MemoryStore,
    registry: &mut SnapshotRegistry,
    config: &LoopConfig,
    env: &LoopEnv<'_>,
    run_id: &str,
    config_hash: &str,
) -> Result<RunRecord, LoopError> {
    config.validate().map_err(LoopError::InvalidConfig)?;
    if !config.selection_strategy.compatible_with(store.format()) {
        return Err(LoopError::StrategyFormatMismatch {
            strategy: config.selection_strategy,
            format: store.format(),
        });
    }
    let ledger_before = env.gateway.ledger();
    if let Some(path) = env.store_path() {
        store.save(&path)?;
    }
    if registry.latest().is_none() {
        registry.take(store, SnapshotLabel::new(SEED_SNAPSHOT)?)?;
    }
    let order = loop_order(dataset.len(), config.ordering);
    let mut states: Vec<ItemState> = vec![ItemState::new(); order.len()];
    let mut write_points = Vec::new();

    match config.memory_mode {
        MemoryMode::Frozen => {
            let snapshot = registry.latest().expect("initial snapshot").clone();
            run_frozen(dataset, &order, &mut states, &snapshot, config, env);
        }
        MemoryMode::Continual => {
            let mut written: BTreeSet<String> = BTreeSet::new();
            let mut pending: Vec<(usize, VerifiedSolution)> = Vec::new();
            for pass in 0..=config.max_retries {
                for (pos, &di) in order.iter().enumerate() {
                    let i = pos + 1;
                    let puzzle = &dataset[di];
                    let state = &mut states[pos];
                    if !state.solved() {
                        let snapshot = registry.latest().expect("initial snapshot").clone();
                        run_item_pass(state, puzzle, pass, &snapshot, true, config, env);
                        if let Some(a) = state.verified_attempt() {
                            let queued = pending.iter().any(|(_, s)| s.puzzle_id() == puzzle.id);
                            if !written.contains(&puzzle.id) && !queued {
                                let sol = VerifiedSolution::from_attempt(a).expect("verified attempt");
                                pending.push((di, sol));
                            }
                        }
                    }
                    if i % config.update_interval_k == 0 {
                        let label = write_point_label(pass, i);
                        let mut point = WritePoint {
                            pass,
                            after_item: i,
                            label: label.as_str().to_string(),
                            written: Vec::new(),
                            failed: Vec::new(),
                        };
                        for (di, sol) in pending.drain(..) {
                            written.insert(sol.puzzle_id().to_string());
                            let store_path = env.store_path();
                            let audit = env.audit_path();
                            let targets = WriteTargets {
                                store_path: store_path.as_deref(),
                                audit_log: audit.as_deref(),
                            };
                            match mem_write(store, &dataset[di], &sol, env.gateway, env.clock, targets) {
                                Ok(summary) => point.written.push(summary),
                                Err(PipelineError::Store(e)) => {
                                    return Err(LoopError::Io(format!("store write failed: {e}")));
                                }
                                Err(e) => {
                                    log::warn!("write of {} failed: {e}", sol.puzzle_id());
                                    point.failed.push(WriteFailure {
                                        puzzle_id: sol.puzzle_id().to_string(),
                                        error: e.to_string(),
                                    });
                                }
                            }
                        }
                        registry.take(store, label)?;
                        write_points.push(point);
                    }
                }
            }
        }
    }

    let items: Vec<ItemRecord> = order
        .iter()
        .zip(states)
        .enumerate()
        .map(|(pos, (&di, state))| {
            let chains: Vec<Vec<AttemptResult>> = state.chains.into_iter().map(AttemptChain::into_attempts).collect();
            ItemRecord {
                index: pos + 1,
                puzzle_id: dataset[di].id.clone(),
                selections: state.selections,
                feedback: get_feedback(&chains),
                chains,
                errors: state.errors,
            }
        })
        .collect();
    let scores = score_items(dataset, &order, &items);
    let record = RunRecord {
        run_id: run_id.to_string(),
        config_hash: config_hash.to_string(),
        prompt_hashes: prompts::template_hashes(),
        loop_config: config.clone(),
        items,
        write_points,
        snapshot_labels: registry.labels().iter().map(|l| l.as_str().to_string()).collect(),
        scores,
        ledger: env.gateway.ledger().since(&ledger_before),
    };
    if let Some(dir) = env.run_dir {
        write_selection_audit(&dir.join("selection-audit.jsonl"), &record)?;
    }
    Ok(record)
}

fn run_frozen(
    dataset: &[Puzzle],
    order: &[usize],
    states: &mut [ItemState],
    snapshot: &Snapshot,
    config: &LoopConfig,
    env: &LoopEnv<'_>,
) {
    let solve_item = |di: usize| {
        let puzzle = &dataset[di];
        let mut state = ItemState::new();
        for pass in 0..=config.max_retries {
            if state.solved() {
                break;
            }
            run_item_pass(&mut state, puzzle, pass, snapshot, false, config, env);
            if state.chains.is_empty() {
                break;
            }
        }
        state
    };
    for (batch_start, batch) in order.chunks(config.batch_size).enumerate().map(|(b, c)| (b * config.batch_size, c)) {
        if config.workers == 1 || batch.len() == 1 {
            for (j, &di) in batch.iter().enumerate() {
                states[batch_start + j] = solve_item(di);
            }
            continue;
        }
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, ItemState)>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..config.workers.min(batch.len()) {
                scope.spawn(|| loop {
                    let j = next.fetch_add(1, AtomicOrdering::SeqCst);
                    if j >= batch.len() {
                        break;
                    }
                    let state = solve_item(batch[j]);
                    results.lock().expect("results lock").push((j, state));
                });
            }
        });
        for (j, state) in results.into_inner().expect("results lock") {
            states[batch_start + j] = state;
        }
    }
}

fn score_items(dataset: &[Puzzle], order: &[usize], items: &[ItemRecord]) -> RunScores {
    let mut puzzles = Vec::new();
    let mut strict = BTreeMap::new();
    let mut unscored = Vec::new();
    let mut credits = RunCredits::new();
    for (item, &di) in items.iter().zip(order) {
        let puzzle = &dataset[di];
        if puzzle.expected_outputs().is_err() {
            unscored.push(puzzle.id.clone());
            continue;
        }
        let candidates: Vec<Vec<TestPrediction>> = item
            .chains
            .iter()
            .filter_map(|c| chain_candidate(c))
            .map(|a| a.test_predictions.clone())
            .collect();
        let score = if candidates.is_empty() {
            let n = puzzle.test.len();
            PuzzleScore {
                puzzle_id: puzzle.id.clone(),
                per_test_case_credit: vec![0; n],
                fraction: 0.0,
                k_used: 0,
            }
        } else {
            oracle_at_k(puzzle, &candidates).expect("expected outputs checked")
        };
        credits.insert(
            puzzle.id.clone(),
            (
                puzzle.test.len(),
                credit_matrix(puzzle, &candidates).expect("expected outputs checked"),
            ),
        );
        strict.insert(
            puzzle.id.clone(),
            strict_score(puzzle, &candidates).expect("expected outputs checked"),
        );
        puzzles.push(score);
    }
    let n = puzzles.len().max(1) as f64;
    let score = 100.0 * puzzles.iter().map(|p| p.fraction).sum::<f64>() / n;
    let strict_score = 100.0 * strict.values().map(|&s| f64::from(s)).sum::<f64>() / n;
    RunScores {
        puzzles,
        strict,
        score,
        strict_score,
        credits,
        unscored,
    }
}

#[derive(Serialize)]
struct SelectionAuditLine<'a> {
    puzzle_id: &'a str,
    pass: u32,
    strategy: SelectionStrategy,
    snapshot: &'a str,
    ids: Vec<u64>,
    total_tokens: u64,
}

fn write_selection_audit(path: &Path, record: &RunRecord) -> Result<(), LoopError> {
    let _ = std::fs::remove_file(path);
    for item in &record.items {
        for s in &item.selections {
            let line = SelectionAuditLine {
                puzzle_id: &item.puzzle_id,
                pass: s.pass,
                strategy: s.selection.strategy,
                snapshot: &s.selection.store_snapshot_label,
                ids: s.selection.ids.iter().map(|i| i.0).collect(),
                total_tokens: s.selection.usage.total(),
            };
            append_json_line(path, &line).map_err(LoopError::Io)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedReport {
    pub applied: Vec<WriteSummary>,
    pub skipped: Vec<WriteFailure>,
}

/// Writes every `(<id>.json, <id>.py)` pair in `seed_dir` into `store`, in
/// lexicographic id order. Pairs that fail verification or abstraction are
/// skipped. The result is snapshotted as `seeded`.
#[allow(clippy::too_many_arguments)]
pub fn seed_memory(
    store: &mut MemoryStore,
    seed_dir: &Path,
    gateway: &Gateway,
    executor: &dyn Executor,
    clock: &dyn Clock,
    targets: WriteTargets<'_>,
    registry: &mut SnapshotRegistry,
) -> Result<SeedReport, LoopError> {
    if !seed_dir.is_dir() {
        return Err(LoopError::SeedDirMissing(seed_dir.to_path_buf()));
    }
    let mut puzzles: Vec<PathBuf> = std::fs::read_dir(seed_dir)
        .map_err(|e| LoopError::Io(format!("{}: {e}", seed_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    puzzles.sort_by(|a, b| a.file_stem().cmp(&b.file_stem()));
    let mut report = SeedReport {
        applied: Vec::new(),
        skipped: Vec::new(),
    };
    for path in puzzles {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let skip = |report: &mut SeedReport, error: String| {
            log::warn!("seed {id} skipped: {error}");
            report.skipped.push(WriteFailure {
                puzzle_id: id.clone(),
                error,
            });
        };
        let puzzle = match load_puzzle_file(&path) {
            Ok(p) => p,
            Err(e) => {
                skip(&mut report, e.to_string());
                continue;
            }
        };
        let program = match std::fs::read_to_string(path.with_extension("py")) {
            Ok(p) => p,
            Err(e) => {
                skip(&mut report, format!("no solution program: {e}"));
                continue;
            }
        };
        let result = VerifiedSolution::verify_seed(&puzzle, &program, executor)
            .and_then(|sol| mem_write(store, &puzzle, &sol, gateway, clock, targets));
        match result {
            Ok(summary) => report.applied.push(summary),
            Err(e) => skip(&mut report, e.to_string()),
        }
    }
    if let Some(path) = targets.store_path {
        store.save(path)?;
    }
    registry.take(store, SnapshotLabel::new(SEEDED_SNAPSHOT)?)?;
    Ok(report)
}
