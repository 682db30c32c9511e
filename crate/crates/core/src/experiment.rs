//! Experiment driver: a TOML config resolved against a workspace root, the
//! run directory layout, resumption, and report regeneration from stored
//! records.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! config.json        resolved config plus its hash
//! progress.json      runs completed so far
//! run<r>/record.json
//! run<r>/items/<nnnn>-<puzzle>.json
//! run<r>/snapshots/snapshot-<label>.json
//! run<r>/memory.json, write-audit.jsonl, selection-audit.jsonl
//! run<r>/transcript.json (scripted backends only)
//! report/            scores, k-curve, token-vs-score, summary
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::WriteTargets;
use crate::clock::{Clock, SteppingClock, SystemClock};
use crate::continual::{run_loop, seed_memory, DatasetOrdering, LoopConfig, LoopEnv, RunRecord, SeedReport};
use crate::evaluator::{build_report, k_curve_from_credits, ReportFiles, RunCredits, RunSummary};
use crate::gateway::{
    Backend, Gateway, OpenAiCompatibleBackend, RemoteConfig, RetryPolicy, RoleConfig, ScriptFile, ScriptedBackend,
    ABSTRACTION_MAX_OUTPUT_TOKENS,
};
use crate::grid::{load_puzzle_dir, Puzzle};
use crate::prompts::sha256_hex;
use crate::sandbox::{ExecLimits, ProcessSandbox};
use crate::selection::{caption_prompt, ps_select_prompt, SelectionStrategy};
use crate::solver::solve_prompt_text;
use crate::store::{MemoryFormat, MemoryStore, SnapshotRegistry};

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Bad config, flags or inputs; nothing was written.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Usage(_) => 2,
            ExperimentError::Runtime(_) => 1,
        }
    }
}

fn usage(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Runtime(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Replays a script file; fully offline.
    Scripted { script: PathBuf },
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxConfig {
    #[serde(default = "default_interpreter")]
    pub interpreter: String,
    #[serde(default)]
    pub limits: ExecLimits,
    /// Concurrent child cap; defaults to the worker count.
    #[serde(default)]
    pub max_children: Option<usize>,
}

fn default_interpreter() -> String {
    "python3".into()
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: default_interpreter(),
            limits: ExecLimits::default(),
            max_children: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    /// Seeded store: written by `seed`, read by `run`.
    pub memory: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_dir: Option<PathBuf>,
    pub format: MemoryFormat,
    pub output_dir: PathBuf,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Shuffles the dataset per run (seed `random_seed + run index`).
    #[serde(default)]
    pub shuffle: bool,
    #[serde(default)]
    pub random_seed: u64,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub backend: BackendConfig,
    #[serde(default = "RoleConfig::reasoner_default")]
    pub reasoner: RoleConfig,
    #[serde(default = "RoleConfig::auxiliary_default")]
    pub auxiliary: RoleConfig,
    #[serde(default = "default_abstraction_tokens")]
    pub abstraction_max_output_tokens: u32,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_runs() -> usize {
    1
}

fn default_abstraction_tokens() -> u32 {
    ABSTRACTION_MAX_OUTPUT_TOKENS
}

/// Scalar overrides from command-line flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub runs: Option<usize>,
    pub max_retries: Option<u32>,
    pub top_k: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(raw: &str) -> Result<Self, ExperimentError> {
        toml::from_str(raw).map_err(|e| usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let raw = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Self::parse(&raw)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(r) = o.runs {
            self.runs = r;
        }
        if let Some(r) = o.max_retries {
            self.loop_config.max_retries = r;
        }
        if let Some(k) = o.top_k {
            self.loop_config.top_k = k;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
    }

    /// Checks everything that can be checked without writing anything.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.loop_config.validate().map_err(usage)?;
        if self.runs == 0 {
            return Err(usage("runs must be at least 1"));
        }
        if self.loop_config.ordering != DatasetOrdering::DatasetOrder {
            return Err(usage("set `shuffle` and `random_seed` instead of loop.ordering"));
        }
        if !self.loop_config.selection_strategy.compatible_with(self.format) {
            return Err(usage(format!(
                "selection strategy {} cannot read a {} store",
                self.loop_config.selection_strategy, self.format
            )));
        }
        self.sandbox.limits.validate().map_err(|e| usage(e.to_string()))?;
        if self.sandbox.max_children == Some(0) {
            return Err(usage("sandbox.max_children must be at least 1"));
        }
        if self.retry.max_attempts == 0 {
            return Err(usage("retry.max_attempts must be at least 1"));
        }
        Ok(())
    }

    /// Hash of the config with `output_dir` blanked, so the same experiment
    /// written to two places hashes identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn is_offline(&self) -> bool {
        matches!(self.backend, BackendConfig::Scripted { .. })
    }
}

/// A config plus the workspace root its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub config: ExperimentConfig,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: ExperimentConfig) -> Self {
        Self {
            root: root.into(),
            config,
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn memory_path(&self) -> PathBuf {
        self.resolve(&self.config.memory)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    /// Seeding artifacts next to the store: `<stem>-snapshots/` and
    /// `<stem>-write-audit.jsonl`.
    fn seed_artifacts(&self) -> (PathBuf, PathBuf) {
        let mem = self.memory_path();
        let stem = mem.file_stem().and_then(|s| s.to_str()).unwrap_or("memory").to_string();
        let dir = mem.parent().map(Path::to_path_buf).unwrap_or_default();
        (
            dir.join(format!("{stem}-snapshots")),
            dir.join(format!("{stem}-write-audit.jsonl")),
        )
    }

    pub fn load_dataset(&self) -> Result<Vec<Puzzle>, ExperimentError> {
        let dir = self.resolve(&self.config.dataset);
        if !dir.is_dir() {
            return Err(usage(format!("dataset directory {} does not exist", dir.display())));
        }
        let puzzles = load_puzzle_dir(&dir).map_err(|e| usage(format!("dataset: {e}")))?;
        if puzzles.is_empty() {
            return Err(usage(format!("dataset directory {} holds no puzzles", dir.display())));
        }
        Ok(puzzles)
    }

    /// The store a run starts from. Without a store file only the
    /// memoryless strategy may run, against an empty store.
    fn load_memory(&self) -> Result<MemoryStore, ExperimentError> {
        let path = self.memory_path();
        if !path.exists() {
            if self.config.loop_config.selection_strategy == SelectionStrategy::None {
                return Ok(MemoryStore::new(self.config.format));
            }
            return Err(usage(format!(
                "memory store {} does not exist; run `conmem seed` first",
                path.display()
            )));
        }
        let store = MemoryStore::load(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if store.format() != self.config.format {
            return Err(usage(format!(
                "{} holds a {} store but the config says {}",
                path.display(),
                store.format(),
                self.config.format
            )));
        }
        Ok(store)
    }

    fn load_script(&self) -> Result<Option<ScriptFile>, ExperimentError> {
        match &self.config.backend {
            BackendConfig::Scripted { script } => {
                let path = self.resolve(script);
                let file = ScriptFile::load(&path).map_err(usage)?;
                file.clone().into_backend().map_err(usage)?;
                Ok(Some(file))
            }
            BackendConfig::Remote(remote) => {
                if std::env::var(&remote.api_key_env).is_err() {
                    return Err(usage(format!("environment variable {} is not set", remote.api_key_env)));
                }
                Ok(None)
            }
        }
    }

    fn sandbox(&self) -> Result<ProcessSandbox, ExperimentError> {
        let s = &self.config.sandbox;
        let children = s.max_children.unwrap_or(self.config.loop_config.workers);
        ProcessSandbox::new(s.interpreter.clone(), s.limits.clone(), children).map_err(|e| runtime(e.to_string()))
    }
}

/// One invocation's model access. Scripted backends are rebuilt from the
/// script for every run so each run replays from the start.
struct Session {
    gateway: Gateway,
    scripted: Option<Arc<ScriptedBackend>>,
    clock: Box<dyn Clock>,
}

impl Session {
    fn open(ws: &Workspace, script: Option<&ScriptFile>) -> Result<Self, ExperimentError> {
        let c = &ws.config;
        let (backend, scripted, clock): (Arc<dyn Backend>, _, Box<dyn Clock>) = match script {
            Some(file) => {
                let b = Arc::new(file.clone().into_backend().map_err(usage)?);
                (b.clone(), Some(b), Box::new(SteppingClock::default()))
            }
            None => {
                let BackendConfig::Remote(remote) = &c.backend else {
                    unreachable!("script is loaded for scripted backends")
                };
                let b = OpenAiCompatibleBackend::from_env(remote).map_err(|e| usage(e.to_string()))?;
                (Arc::new(b), None, Box::new(SystemClock))
            }
        };
        let mut gateway = Gateway::single(backend).with_retry(c.retry.clone());
        gateway.reasoner_config = c.reasoner.clone();
        gateway.auxiliary_config = c.auxiliary.clone();
        gateway.abstraction_max_output_tokens = c.abstraction_max_output_tokens;
        Ok(Self {
            gateway,
            scripted,
            clock,
        })
    }

    fn save_transcript(&self, path: &Path) -> Result<(), ExperimentError> {
        if let Some(b) = &self.scripted {
            write_file(path, &b.transcript_json())?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

/// Seeds the configured store from `seed_dir`. Refuses to replace an
/// existing store unless `fresh`.
pub fn cmd_seed(ws: &Workspace, fresh: bool) -> Result<SeedReport, ExperimentError> {
    ws.config.validate()?;
    let seed_dir = ws
        .config
        .seed_dir
        .as_ref()
        .map(|d| ws.resolve(d))
        .ok_or_else(|| usage("config has no seed_dir"))?;
    if !seed_dir.is_dir() {
        return Err(usage(format!("seed directory {} does not exist", seed_dir.display())));
    }
    let mem = ws.memory_path();
    let (snap_dir, audit) = ws.seed_artifacts();
    if mem.exists() && !fresh {
        return Err(usage(format!(
            "{} already exists; pass --fresh to recreate it",
            mem.display()
        )));
    }
    let script = ws.load_script()?;
    let sandbox = ws.sandbox()?;
    if fresh {
        for f in [&mem, &audit] {
            if f.exists() {
                std::fs::remove_file(f).map_err(|e| runtime(format!("{}: {e}", f.display())))?;
            }
        }
        if snap_dir.exists() {
            std::fs::remove_dir_all(&snap_dir).map_err(|e| runtime(format!("{}: {e}", snap_dir.display())))?;
        }
    }
    std::fs::create_dir_all(&snap_dir).map_err(|e| runtime(format!("{}: {e}", snap_dir.display())))?;
    let session = Session::open(ws, script.as_ref())?;
    let mut store = MemoryStore::new(ws.config.format);
    let mut registry = SnapshotRegistry::on_disk(&snap_dir);
    let targets = WriteTargets {
        store_path: Some(&mem),
        audit_log: Some(&audit),
    };
    seed_memory(
        &mut store,
        &seed_dir,
        &session.gateway,
        &sandbox,
        session.clock.as_ref(),
        targets,
        &mut registry,
    )
    .map_err(|e| runtime(e.to_string()))
}

/// The first prompt a run would send (or, for `all`/`none`, the first solve
/// prompt), composed without side effects.
pub fn dry_run_prompt(ws: &Workspace) -> Result<String, ExperimentError> {
    ws.config.validate()?;
    let dataset = ws.load_dataset()?;
    let store = ws.load_memory()?;
    ws.load_script()?;
    let first = if ws.config.shuffle {
        let order = shuffled_order(dataset.len(), ws.config.random_seed);
        &dataset[order[0]]
    } else {
        &dataset[0]
    };
    let blind = first.blind();
    let prompt = match ws.config.loop_config.selection_strategy {
        SelectionStrategy::OeTopk => caption_prompt(&blind),
        SelectionStrategy::PsReasoning => ps_select_prompt(&blind, &store).map_err(|e| runtime(e.to_string()))?,
        SelectionStrategy::All => {
            let rendering = if store.is_empty() {
                String::new()
            } else {
                store.render_full(Some(&store.ids())).map_err(|e| runtime(e.to_string()))?
            };
            solve_prompt_text(&blind, &rendering)
        }
        SelectionStrategy::None => solve_prompt_text(&blind, ""),
    };
    Ok(prompt)
}

fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
    order
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub config_hash: String,
    pub completed: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredConfig {
    config_hash: String,
    config: ExperimentConfig,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub report: ReportFiles,
    /// Runs loaded from a previous invocation instead of executed.
    pub resumed: Vec<String>,
}

pub fn run_id(r: usize) -> String {
    format!("run{}", r + 1)
}

fn read_progress(path: &Path) -> Result<Option<Progress>, ExperimentError> {
    if !path.exists() {
        return Ok(None);
    }
    let raw = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map(Some)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn load_record(path: &Path) -> Result<RunRecord, ExperimentError> {
    let raw = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Runs every configured run, skipping runs a previous invocation of the
/// same config already completed, then writes the report.
pub fn run_experiment(ws: &Workspace) -> Result<ExperimentOutcome, ExperimentError> {
    let c = &ws.config;
    c.validate()?;
    let dataset = ws.load_dataset()?;
    let seed_store = ws.load_memory()?;
    let script = ws.load_script()?;
    let hash = c.hash();
    let out = ws.output_dir();
    let progress_path = out.join("progress.json");
    let mut progress = match read_progress(&progress_path)? {
        Some(p) if p.config_hash != hash => {
            return Err(usage(format!(
                "{} holds results of a different config ({}); choose another output_dir",
                out.display(),
                p.config_hash
            )))
        }
        Some(p) => p,
        None => Progress {
            config_hash: hash.clone(),
            completed: Vec::new(),
        },
    };
    let sandbox = ws.sandbox()?;
    let probe = sandbox.probe_runtime().map_err(|e| runtime(e.to_string()))?;
    log::info!("sandbox: {} ({})", probe.version, probe.interpreter);

    write_file(
        &out.join("config.json"),
        &to_pretty_json(&StoredConfig {
            config_hash: hash.clone(),
            config: c.clone(),
        }),
    )?;
    let mut records = Vec::with_capacity(c.runs);
    let mut resumed = Vec::new();
    for r in 0..c.runs {
        let id = run_id(r);
        let run_dir = out.join(&id);
        if progress.completed.contains(&id) {
            log::info!("{id}: already complete, loading record");
            records.push(load_record(&run_dir.join("record.json"))?);
            resumed.push(id);
            continue;
        }
        if run_dir.exists() {
            std::fs::remove_dir_all(&run_dir).map_err(|e| runtime(format!("{}: {e}", run_dir.display())))?;
        }
        let snap_dir = run_dir.join("snapshots");
        std::fs::create_dir_all(&snap_dir).map_err(|e| runtime(format!("{}: {e}", snap_dir.display())))?;

        let session = Session::open(ws, script.as_ref())?;
        let mut loop_config = c.loop_config.clone();
        if c.shuffle {
            loop_config.ordering = DatasetOrdering::Shuffled {
                seed: c.random_seed.wrapping_add(r as u64),
            };
        }
        let env = LoopEnv {
            gateway: &session.gateway,
            executor: &sandbox,
            clock: session.clock.as_ref(),
            run_dir: Some(&run_dir),
        };
        let mut store = seed_store.clone();
        let mut registry = SnapshotRegistry::on_disk(&snap_dir);
        log::info!("{id}: {} puzzles", dataset.len());
        let record = run_loop(&dataset, &mut store, &mut registry, &loop_config, &env, &id, &hash)
            .map_err(|e| runtime(format!("{id}: {e}")))?;
        for item in &record.items {
            write_file(
                &run_dir.join("items").join(format!("{:04}-{}.json", item.index, item.puzzle_id)),
                &to_pretty_json(item),
            )?;
        }
        session.save_transcript(&run_dir.join("transcript.json"))?;
        write_file(&run_dir.join("record.json"), &record.to_json())?;
        progress.completed.push(id);
        write_file(&progress_path, &to_pretty_json(&progress))?;
        records.push(record);
    }
    let report = report_from_records(&records);
    write_report(&out.join("report"), &report)?;
    Ok(ExperimentOutcome {
        records,
        report,
        resumed,
    })
}

pub fn run_summary(record: &RunRecord) -> RunSummary {
    RunSummary {
        run_id: record.run_id.clone(),
        score: record.scores.score,
        strict_score: record.scores.strict_score,
        solving_tokens: record.ledger.solving_and_retry().total(),
        total_tokens: record.ledger.total().total(),
    }
}

/// Report tables computed from stored records alone.
pub fn report_from_records(records: &[RunRecord]) -> ReportFiles {
    let summaries: Vec<RunSummary> = records.iter().map(run_summary).collect();
    let credits: Vec<RunCredits> = records.iter().map(|r| r.scores.credits.clone()).collect();
    build_report(&summaries, &k_curve_from_credits(&credits))
}

pub fn write_report(dir: &Path, report: &ReportFiles) -> Result<(), ExperimentError> {
    for (name, body) in report.files() {
        write_file(&dir.join(name), body)?;
    }
    Ok(())
}

/// Records found in `dir`: either a run directory holding `record.json` or
/// an experiment directory holding `run*/record.json`, in run order.
pub fn records_in(dir: &Path) -> Result<Vec<RunRecord>, ExperimentError> {
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    let direct = dir.join("record.json");
    if direct.exists() {
        return Ok(vec![load_record(&direct)?]);
    }
    let mut runs: Vec<(usize, PathBuf)> = std::fs::read_dir(dir)
        .map_err(|e| runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let n = p.file_name()?.to_str()?.strip_prefix("run")?.parse::<usize>().ok()?;
            p.join("record.json").exists().then_some((n, p.join("record.json")))
        })
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(usage(format!("no run records under {}", dir.display())));
    }
    runs.iter().map(|(_, p)| load_record(p)).collect()
}

#[derive(Debug)]
pub struct RegeneratedReport {
    pub report: ReportFiles,
    /// Stored report files that differ from the regenerated ones.
    pub mismatches: Vec<PathBuf>,
}

/// Recomputes the report from the records under `dirs`. When a single
/// experiment directory is given, its stored report is compared.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<RegeneratedReport, ExperimentError> {
    if dirs.is_empty() {
        return Err(usage("report needs at least one run directory"));
    }
    let mut records = Vec::new();
    for d in dirs {
        records.extend(records_in(d)?);
    }
    let report = report_from_records(&records);
    let mut mismatches = Vec::new();
    if let [dir] = dirs {
        let stored = dir.join("report");
        if stored.is_dir() {
            for (name, body) in report.files() {
                let path = stored.join(name);
                if std::fs::read_to_string(&path).ok().as_deref() != Some(body) {
                    log::warn!("stored report {} differs from the recomputed one", path.display());
                    mismatches.push(path);
                }
            }
        }
    }
    Ok(RegeneratedReport { report, mismatches })
}
