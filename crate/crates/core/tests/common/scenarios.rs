use std::path::Path;
use std::sync::Arc;

use conmem::clock::SteppingClock;
use conmem::continual::{run_loop, LoopConfig, LoopEnv, MemoryMode, RunRecord};
use conmem::gateway::{Matcher, ScriptEntry, ScriptedBackend, Stage};
use conmem::grid::Puzzle;
use conmem::selection::SelectionStrategy;
use conmem::store::{MemoryFormat, MemoryStore, SnapshotRegistry};

use super::{counting_dataset, fenced, marker, ps_scenario_script, reply, scripted, FakeExecutor};

/// Runs the loop against a scripted backend and the in-process executor.
pub fn run_scripted(
    dataset: &[Puzzle],
    store: &mut MemoryStore,
    config: &LoopConfig,
    entries: Vec<ScriptEntry>,
    run_dir: Option<&Path>,
) -> (RunRecord, Arc<ScriptedBackend>) {
    let (gateway, backend) = scripted(entries);
    let executor = FakeExecutor::default();
    let clock = SteppingClock::default();
    let env = LoopEnv {
        gateway: &gateway,
        executor: &executor,
        clock: &clock,
        run_dir,
    };
    let mut registry = match run_dir {
        Some(d) => SnapshotRegistry::on_disk(d),
        None => SnapshotRegistry::in_memory(),
    };
    let record = run_loop(dataset, store, &mut registry, config, &env, "run1", "hash").unwrap();
    (record, backend)
}

/// Item 12 is solved only when its prompt shows the concept written from
/// item 10; every other item except p10 fails.
pub fn emergence_script(dataset: &[Puzzle]) -> Vec<ScriptEntry> {
    let mut entries = vec![reply(
        Matcher::contains(marker(&dataset[11]))
            .and_contains("increment p10")
            .stage(Stage::Solving),
        fenced("python", "# p12\nadd 1"),
    )];
    entries.extend(ps_scenario_script(dataset, |p| {
        if p.id == "p10" { "add 1" } else { "add 2" }.into()
    }));
    entries
}

/// Score and solved ids of the emergence scenario under `mode`.
pub fn emergence(mode: MemoryMode) -> (f64, String) {
    let dataset = counting_dataset(12);
    let mut store = MemoryStore::new(MemoryFormat::Ps);
    let config = LoopConfig::new(SelectionStrategy::All, mode);
    let (record, _) = run_scripted(&dataset, &mut store, &config, emergence_script(&dataset), None);
    let solved: Vec<&str> = record
        .items
        .iter()
        .filter(|i| i.feedback.verified)
        .map(|i| i.puzzle_id.as_str())
        .collect();
    (record.scores.score, solved.join(","))
}
