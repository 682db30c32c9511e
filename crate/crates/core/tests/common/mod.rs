#![allow(dead_code)]

pub mod scenarios;
pub mod scoring;
pub mod store_ops;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use conmem::gateway::{Gateway, Matcher, RetryPolicy, ScriptEntry, ScriptedBackend, Stage, TranscriptEntry};
use conmem::grid::{ExamplePair, Grid, Puzzle, TestCase};
use conmem::prompts::{render_puzzle, sha256_hex};
use conmem::sandbox::{CaseResult, ExecLimits, ExecOutcome, Executor, ProcessStatus, SandboxError};
use serde_json::json;

pub fn g(rows: &[&[u8]]) -> Grid {
    Grid::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
}

pub fn puzzle(id: &str, train: Vec<(Grid, Grid)>, test: Vec<(Grid, Grid)>) -> Puzzle {
    Puzzle::new(
        id,
        train.into_iter().map(|(input, output)| ExamplePair { input, output }).collect(),
        test.into_iter()
            .map(|(input, expected)| TestCase {
                input,
                expected: Some(expected),
            })
            .collect(),
    )
    .unwrap()
}

/// In-process stand-in for the sandbox. Programs are lines of a tiny
/// language: `add N` adds N (mod 10) to every cell, `identity` returns the
/// input, `crash` raises; `#` lines are comments.
#[derive(Default)]
pub struct FakeExecutor {
    limits: ExecLimits,
}

impl Executor for FakeExecutor {
    fn run(&self, program: &str, inputs: &[Grid]) -> Result<ExecOutcome, SandboxError> {
        let op = program
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty() && !l.starts_with('#'))
            .unwrap_or("")
            .to_string();
        let cases = inputs
            .iter()
            .map(|grid| {
                if op == "identity" {
                    return CaseResult::Grid { grid: grid.clone() };
                }
                if let Some(n) = op.strip_prefix("add ").and_then(|n| n.parse::<u8>().ok()) {
                    let rows = grid.rows().iter().map(|r| r.iter().map(|c| (c + n) % 10).collect()).collect();
                    return CaseResult::Grid {
                        grid: Grid::new(rows).unwrap(),
                    };
                }
                CaseResult::RuntimeError {
                    message: format!("cannot run {op:?}"),
                }
            })
            .collect();
        Ok(ExecOutcome {
            cases,
            process: ProcessStatus::Ok,
        })
    }

    fn limits(&self) -> &ExecLimits {
        &self.limits
    }
}

pub fn scripted(entries: Vec<ScriptEntry>) -> (Gateway, Arc<ScriptedBackend>) {
    let backend = Arc::new(ScriptedBackend::matching(entries).unwrap());
    let gateway = Gateway::single(backend.clone()).with_retry(RetryPolicy::immediate(1));
    (gateway, backend)
}

pub fn reply(matcher: Matcher, text: impl Into<String>) -> ScriptEntry {
    ScriptEntry::text(matcher, text).repeating()
}

pub fn fenced(tag: &str, body: &str) -> String {
    format!("```{tag}\n{body}\n```")
}

/// Text that appears only in requests about `p`: its first train input.
pub fn marker(p: &Puzzle) -> String {
    format!("Input:\n{}\n", p.train[0].input.render_text())
}

/// Puzzle `p<i>` of a dataset where every item is solved by `add 1`.
pub fn counting_puzzle(i: usize) -> Puzzle {
    let (a, b) = ((i / 10) as u8, (i % 10) as u8);
    let inc = |v: u8| (v + 1) % 10;
    puzzle(
        &format!("p{i:02}"),
        vec![
            (g(&[&[a, b, 0]]), g(&[&[inc(a), inc(b), 1]])),
            (g(&[&[5, 5, a, b]]), g(&[&[6, 6, inc(a), inc(b)]])),
        ],
        vec![(g(&[&[7, a, b]]), g(&[&[8, inc(a), inc(b)]]))],
    )
}

pub fn counting_dataset(n: usize) -> Vec<Puzzle> {
    (1..=n).map(counting_puzzle).collect()
}

pub const PSEUDO: &str = "Rewrite the program below";
pub const LIBRARY: &str = "You maintain a library";

pub fn routine(title: &str, cue: &str) -> serde_json::Value {
    json!({
        "title": title,
        "description": format!("{title} as used before"),
        "kind": "routine",
        "parameters": [{"name": "grid", "description": "input", "type_annotation": "grid"}],
        "output_typing": "grid",
        "relevance_cues": [cue],
        "implementation_notes": []
    })
}

/// Script for a PS continual scenario: each puzzle's solve reply comes from
/// `program(puzzle)`, and every written puzzle adds one routine titled
/// `increment <id>`. Selection picks nothing.
pub fn ps_scenario_script(dataset: &[Puzzle], program: impl Fn(&Puzzle) -> String) -> Vec<ScriptEntry> {
    let mut entries = vec![reply(
        Matcher::any().stage(Stage::Selection),
        "Nothing applies.\n```selection\n```",
    )];
    for p in dataset {
        let tag = format!("# {}\n", p.id);
        entries.push(reply(
            Matcher::contains(marker(p)).stage(Stage::Solving),
            fenced("python", &format!("{tag}{}", program(p))),
        ));
        entries.push(reply(
            Matcher::contains(PSEUDO).and_contains(tag.clone()).stage(Stage::Abstraction),
            fenced("pseudocode", &format!("shift cells of {} by one", p.id)),
        ));
        let title = format!("increment {}", p.id);
        entries.push(reply(
            Matcher::contains(LIBRARY)
                .and_contains(format!("shift cells of {} by one", p.id))
                .stage(Stage::Abstraction),
            fenced(
                "json",
                &json!({"additions": [routine(&title, "cells shift by one color")], "revisions": []}).to_string(),
            ),
        ));
    }
    entries
}

pub fn file_sha(path: &Path) -> String {
    sha256_hex(&std::fs::read(path).unwrap())
}

pub fn live_processes_running(needle: &str) -> Vec<u32> {
    let mut out = Vec::new();
    for e in std::fs::read_dir("/proc").unwrap().flatten() {
        let Some(pid) = e.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let cmd = std::fs::read(e.path().join("cmdline")).unwrap_or_default();
        if String::from_utf8_lossy(&cmd).contains(needle) {
            out.push(pid);
        }
    }
    out
}

/// Expected test outputs found in any request. Outputs whose rendering also
/// appears in some puzzle's visible part cannot be told apart from
/// legitimate content and are not checked.
pub fn leaked_outputs(transcript: &[TranscriptEntry], puzzles: &[Puzzle]) -> Vec<String> {
    let visible: String = puzzles.iter().map(|p| render_puzzle(&p.blind())).collect();
    let mut leaks = Vec::new();
    for p in puzzles {
        for (i, case) in p.test.iter().enumerate() {
            let Some(expected) = &case.expected else { continue };
            let text = expected.render_text();
            if visible.contains(&text) {
                continue;
            }
            if transcript.iter().any(|t| t.request.full_text().contains(&text)) {
                leaks.push(format!("{} test {i}", p.id));
            }
        }
    }
    leaks
}

/// Copies the toy preset into `dest` (dataset, seeds, script, configs).
pub fn copy_toy_preset(dest: &Path) {
    let src = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets/toy");
    for sub in ["dataset", "seeds"] {
        std::fs::create_dir_all(dest.join(sub)).unwrap();
        for e in std::fs::read_dir(src.join(sub)).unwrap().flatten() {
            std::fs::copy(e.path(), dest.join(sub).join(e.file_name())).unwrap();
        }
    }
    for f in ["script.json", "ps.toml", "oe.toml", "baseline.toml"] {
        std::fs::copy(src.join(f), dest.join(f)).unwrap();
    }
}

/// Every file under `dir`, relative path to contents, sorted.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push((p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
