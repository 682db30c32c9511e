use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use conmem::experiment::{
    cmd_report, cmd_seed, dry_run_prompt, run_experiment, write_report, ExperimentConfig, ExperimentError,
    Overrides, SandboxConfig, Workspace,
};
use conmem::sandbox::ProcessSandbox;
use conmem::store::{MemoryStore, StoreError};

#[derive(Parser, Debug)]
#[command(name = "conmem", version, about = "Seed, run and score concept-memory experiments")]
struct Cli {
    /// Workspace root; relative paths in the config and flags resolve here.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,
    /// Experiment config (TOML), relative to the root.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the memory store from the seed solutions.
    Seed {
        /// Delete an existing store and its seeding artifacts first.
        #[arg(long)]
        fresh: bool,
    },
    /// Run the configured experiment and write records and reports.
    Run {
        /// Print the first composed prompt and exit.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        max_retries: Option<u32>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Recompute report tables from stored run records.
    Report {
        dirs: Vec<PathBuf>,
        /// Also write the report files here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect a memory store.
    Memory {
        #[command(subcommand)]
        action: MemoryAction,
    },
    /// Check the sandbox interpreter and shim handshake.
    Probe,
}

#[derive(Subcommand, Debug)]
enum MemoryAction {
    Show {
        #[arg(long)]
        compressed: bool,
        /// Store file; defaults to the config's memory path.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    Stats {
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn usage(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Usage(msg.into())
}

fn workspace(cli: &Cli, overrides: &Overrides) -> Result<Workspace, ExperimentError> {
    let path = cli.config.as_ref().ok_or_else(|| usage("--config is required for this command"))?;
    let mut config = ExperimentConfig::load(&resolve(&cli.root, path))?;
    config.apply(overrides);
    config.validate()?;
    Ok(Workspace::new(cli.root.clone(), config))
}

fn store_error(e: StoreError) -> ExperimentError {
    match e {
        StoreError::FormatMismatch { .. } => usage(e.to_string()),
        other => ExperimentError::Runtime(other.to_string()),
    }
}

fn memory_path(cli: &Cli, path: &Option<PathBuf>) -> Result<PathBuf, ExperimentError> {
    match path {
        Some(p) => Ok(resolve(&cli.root, p)),
        None => Ok(workspace(cli, &Overrides::default())?.memory_path()),
    }
}

fn load_store(path: &Path) -> Result<MemoryStore, ExperimentError> {
    if !path.exists() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    MemoryStore::load(path).map_err(store_error)
}

fn execute(cli: &Cli) -> Result<(), ExperimentError> {
    match &cli.command {
        Command::Seed { fresh } => {
            let ws = workspace(cli, &Overrides::default())?;
            let report = cmd_seed(&ws, *fresh)?;
            for s in &report.skipped {
                eprintln!("skipped {}: {}", s.puzzle_id, s.error);
            }
            let store = MemoryStore::load(&ws.memory_path()).map_err(store_error)?;
            println!(
                "seeded {} concepts from {} solutions ({} skipped) into {}",
                store.len(),
                report.applied.len(),
                report.skipped.len(),
                ws.memory_path().display()
            );
        }
        Command::Run {
            dry_run,
            runs,
            max_retries,
            top_k,
            output_dir,
        } => {
            let overrides = Overrides {
                runs: *runs,
                max_retries: *max_retries,
                top_k: *top_k,
                output_dir: output_dir.clone(),
            };
            let ws = workspace(cli, &overrides)?;
            if *dry_run {
                print!("{}", dry_run_prompt(&ws)?);
                return Ok(());
            }
            let outcome = run_experiment(&ws)?;
            for id in &outcome.resumed {
                eprintln!("{id}: resumed from a previous invocation");
            }
            print!("{}", outcome.report.summary_txt);
            println!("output: {}", ws.output_dir().display());
        }
        Command::Report { dirs, out } => {
            let dirs: Vec<PathBuf> = dirs.iter().map(|d| resolve(&cli.root, d)).collect();
            let regenerated = cmd_report(&dirs)?;
            for m in &regenerated.mismatches {
                eprintln!("warning: stored report {} differs from the recomputed one", m.display());
            }
            if let Some(out) = out {
                write_report(&resolve(&cli.root, out), &regenerated.report)?;
            }
            print!("{}", regenerated.report.summary_txt);
        }
        Command::Memory { action } => match action {
            MemoryAction::Show { compressed, path } => {
                let store = load_store(&memory_path(cli, path)?)?;
                let text = if *compressed {
                    store.render_compressed()
                } else {
                    store.render_full(None)
                }
                .map_err(store_error)?;
                print!("{text}");
            }
            MemoryAction::Stats { path } => {
                let stats = load_store(&memory_path(cli, path)?)?.stats();
                println!("format: {}", stats.format);
                println!("concepts: {}", stats.concepts);
                for (kind, n) in &stats.by_kind {
                    println!("kind {kind}: {n}");
                }
                for (revs, n) in &stats.revisions {
                    println!("revised {revs}x: {n}");
                }
                println!(
                    "provenance: {}/{} concepts, {} source puzzles",
                    stats.with_provenance, stats.concepts, stats.source_puzzles
                );
            }
        },
        Command::Probe => {
            let sandbox_config = match &cli.config {
                Some(_) => workspace(cli, &Overrides::default())?.config.sandbox,
                None => SandboxConfig::default(),
            };
            let sandbox = ProcessSandbox::new(
                sandbox_config.interpreter,
                sandbox_config.limits,
                sandbox_config.max_children.unwrap_or(1),
            )
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
            let report = sandbox.probe_runtime().map_err(|e| ExperimentError::Runtime(e.to_string()))?;
            println!("interpreter: {}", report.interpreter);
            println!("version: {}", report.version);
            println!("shim: {}", report.shim_path);
            println!("handshake: {}", if report.echo_roundtrip { "ok" } else { "failed" });
            if !report.echo_roundtrip {
                return Err(ExperimentError::Runtime("shim handshake failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
