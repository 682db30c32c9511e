mod common;

use std::path::{Path, PathBuf};

use common::*;
use conmem::experiment::{cmd_report, cmd_seed, run_experiment, ExperimentConfig, ExperimentError, ExperimentOutcome, Workspace};
use conmem::gateway::TranscriptEntry;

const PRESETS: [&str; 3] = ["ps.toml", "oe.toml", "baseline.toml"];

fn workspace(root: &Path, config: &str) -> Workspace {
    Workspace::new(root, ExperimentConfig::load(&root.join(config)).unwrap())
}

fn toy_root() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_toy_preset(dir.path());
    dir
}

fn seed_and_run(root: &Path, config: &str) -> ExperimentOutcome {
    let ws = workspace(root, config);
    if ws.config.seed_dir.is_some() {
        cmd_seed(&ws, true).unwrap();
    }
    run_experiment(&ws).unwrap()
}

fn preset_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets/toy")
}

#[test]
fn toy_presets_are_byte_identical_across_roots() {
    let (a, b) = (toy_root(), toy_root());
    for config in PRESETS {
        let out_a = seed_and_run(a.path(), config);
        seed_and_run(b.path(), config);
        assert!(out_a.report.summary_txt.contains("66.67"), "{config}: {}", out_a.report.summary_txt);
        let ws = workspace(a.path(), config);
        assert_eq!(tree(&ws.output_dir()), tree(&workspace(b.path(), config).output_dir()), "{config}");
    }
    // The checked-in seeded stores are what seeding produces.
    for store in ["memory-ps.json", "memory-oe.json"] {
        assert_eq!(file_sha(&a.path().join(store)), file_sha(&preset_dir().join(store)), "{store}");
    }
}

#[test]
fn no_prompt_contains_an_expected_test_output() {
    let root = toy_root();
    for config in PRESETS {
        seed_and_run(root.path(), config);
        let ws = workspace(root.path(), config);
        let dataset = ws.load_dataset().unwrap();
        for run in ["run1", "run2"] {
            let raw = std::fs::read_to_string(ws.output_dir().join(run).join("transcript.json")).unwrap();
            let transcript: Vec<TranscriptEntry> = serde_json::from_str(&raw).unwrap();
            assert!(!transcript.is_empty());
            assert_eq!(leaked_outputs(&transcript, &dataset), Vec::<String>::new(), "{config} {run}");
        }
    }
}

#[test]
fn interrupted_experiments_resume_at_the_first_unfinished_run() {
    let root = toy_root();
    let first = seed_and_run(root.path(), "ps.toml");
    let ws = workspace(root.path(), "ps.toml");
    let out = ws.output_dir();
    let before = tree(&out);

    // Simulate a crash during run2: its directory is partial and progress
    // lists only run1.
    std::fs::remove_file(out.join("run2/record.json")).unwrap();
    std::fs::write(out.join("run2/stray.txt"), "partial").unwrap();
    let progress = std::fs::read_to_string(out.join("progress.json")).unwrap().replace(",\n    \"run2\"", "");
    std::fs::write(out.join("progress.json"), progress).unwrap();

    let second = run_experiment(&ws).unwrap();
    assert_eq!(second.resumed, vec!["run1"]);
    assert_eq!(second.report, first.report);
    assert_eq!(tree(&out), before);

    let again = run_experiment(&ws).unwrap();
    assert_eq!(again.resumed, vec!["run1", "run2"]);
}

#[test]
fn a_changed_config_cannot_reuse_an_output_dir() {
    let root = toy_root();
    seed_and_run(root.path(), "ps.toml");
    let mut ws = workspace(root.path(), "ps.toml");
    ws.config.loop_config.max_retries = 2;
    let err = run_experiment(&ws).unwrap_err();
    assert!(matches!(err, ExperimentError::Usage(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn reports_regenerate_from_records_and_flag_edits() {
    let root = toy_root();
    let outcome = seed_and_run(root.path(), "ps.toml");
    let out = workspace(root.path(), "ps.toml").output_dir();
    let regenerated = cmd_report(std::slice::from_ref(&out)).unwrap();
    assert_eq!(regenerated.report, outcome.report);
    assert!(regenerated.mismatches.is_empty());

    let separate = cmd_report(&[out.join("run1"), out.join("run2")]).unwrap();
    assert_eq!(separate.report, outcome.report);

    std::fs::write(out.join("report/scores.csv"), "edited\n").unwrap();
    let flagged = cmd_report(std::slice::from_ref(&out)).unwrap();
    assert_eq!(flagged.mismatches, vec![out.join("report/scores.csv")]);
    assert!(matches!(cmd_report(&[]), Err(ExperimentError::Usage(_))));
}

#[test]
fn seeding_refuses_to_overwrite_without_fresh() {
    let root = toy_root();
    let ws = workspace(root.path(), "ps.toml");
    cmd_seed(&ws, true).unwrap();
    assert!(matches!(cmd_seed(&ws, false), Err(ExperimentError::Usage(_))));
    let mut missing = workspace(root.path(), "ps.toml");
    missing.config.seed_dir = Some("nowhere".into());
    assert!(matches!(cmd_seed(&missing, true), Err(ExperimentError::Usage(_))));
}
