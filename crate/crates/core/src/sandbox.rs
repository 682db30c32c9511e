//! Supervised execution of untrusted candidate programs.
//!
//! Each [`ProcessSandbox::run`] spawns one interpreter process running the
//! runner shim in its own process group, sends a single framed request on
//! stdin and reads a single framed response from stdout. The whole group is
//! killed at the wall-clock limit. Every returned grid is re-validated here;
//! the shim's checks are advisory.
//!
//! Frame: `CMEM-FRAME <n>\n` + `n` bytes of UTF-8 JSON + `\n`.
//! Request: `{"protocol":1,"program":..,"entry_name":..,"cases":[grid..]}`.
//! Response: `{"protocol":1,"per_case":[{"status":"ok","grid":..} |
//! {"status":"error","error":..} | {"status":"invalid","error":..}]}`.
//! Handshake: `{"protocol":1,"echo":s}` answered by
//! `{"protocol":1,"echo":s,"interpreter":"Python x.y.z"}`.

use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::grid::Grid;

pub const PROTOCOL_VERSION: u64 = 1;
pub const FRAME_HEADER: &str = "CMEM-FRAME ";
/// Entry function every candidate program must define.
pub const ENTRY_NAME: &str = "transform";
/// Extra time allowed after the limit for the kill to land.
pub const KILL_GRACE: Duration = Duration::from_secs(1);

pub const RUNNER_SHIM_SOURCE: &str = include_str!("../assets/runner_shim.py");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecLimits {
    pub wall_clock_seconds: f64,
    pub max_stdout_bytes: usize,
    pub max_cases: usize,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            wall_clock_seconds: 10.0,
            max_stdout_bytes: 1 << 20,
            max_cases: 64,
        }
    }
}

impl ExecLimits {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.wall_clock_seconds.is_nan() || self.wall_clock_seconds <= 0.0 || self.max_stdout_bytes == 0 || self.max_cases == 0 {
            return Err(SandboxError::InvalidLimits(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn wall_clock(&self) -> Duration {
        Duration::from_secs_f64(self.wall_clock_seconds)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CaseResult {
    Grid { grid: Grid },
    RuntimeError { message: String },
    InvalidOutput { description: String },
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum ProcessStatus {
    Ok,
    ProtocolError(String),
    KilledTimeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub cases: Vec<CaseResult>,
    pub process: ProcessStatus,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SandboxError {
    #[error("could not start interpreter {interpreter:?}: {message}. Install Python 3 or set sandbox.interpreter in the config")]
    SpawnFailure { interpreter: String, message: String },
    #[error("invalid inputs: {0}")]
    InvalidInput(String),
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
    #[error("handshake failed: {0}")]
    Handshake(String),
}

/// Runs candidate programs. Implemented by [`ProcessSandbox`]; tests may
/// substitute their own.
pub trait Executor: Send + Sync {
    fn run(&self, program: &str, inputs: &[Grid]) -> Result<ExecOutcome, SandboxError>;
    fn limits(&self) -> &ExecLimits;
}

/// Counting semaphore capping concurrent child processes.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().expect("semaphore lock");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore lock");
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().expect("semaphore lock") += 1;
        self.sem.cv.notify_one();
    }
}

#[derive(Debug)]
enum ShimLocation {
    Path(PathBuf),
    Embedded(tempfile::TempDir),
}

#[derive(Debug, Clone)]
pub struct ProcessSandbox {
    interpreter: String,
    shim: Arc<ShimLocation>,
    limits: ExecLimits,
    slots: Arc<Semaphore>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub interpreter: String,
    pub version: String,
    pub shim_path: String,
    pub echo_roundtrip: bool,
}

/// Raw result of one child invocation.
struct ChildRun {
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    timed_out: bool,
    overflowed: bool,
}

impl ProcessSandbox {
    /// Uses the bundled shim, materialized into a private temp directory.
    pub fn new(interpreter: impl Into<String>, limits: ExecLimits, max_children: usize) -> Result<Self, SandboxError> {
        limits.validate()?;
        let dir = tempfile::tempdir().map_err(|e| SandboxError::SpawnFailure {
            interpreter: "shim".into(),
            message: e.to_string(),
        })?;
        std::fs::write(dir.path().join("runner_shim.py"), RUNNER_SHIM_SOURCE).map_err(|e| {
            SandboxError::SpawnFailure {
                interpreter: "shim".into(),
                message: e.to_string(),
            }
        })?;
        Ok(Self {
            interpreter: interpreter.into(),
            shim: Arc::new(ShimLocation::Embedded(dir)),
            limits,
            slots: Arc::new(Semaphore::new(max_children)),
        })
    }

    pub fn with_shim_path(
        interpreter: impl Into<String>,
        shim_path: impl Into<PathBuf>,
        limits: ExecLimits,
        max_children: usize,
    ) -> Result<Self, SandboxError> {
        limits.validate()?;
        Ok(Self {
            interpreter: interpreter.into(),
            shim: Arc::new(ShimLocation::Path(shim_path.into())),
            limits,
            slots: Arc::new(Semaphore::new(max_children)),
        })
    }

    pub fn shim_path(&self) -> PathBuf {
        match self.shim.as_ref() {
            ShimLocation::Path(p) => p.clone(),
            ShimLocation::Embedded(d) => d.path().join("runner_shim.py"),
        }
    }

    pub fn interpreter(&self) -> &str {
        &self.interpreter
    }

    fn spawn_failure(&self, e: impl ToString) -> SandboxError {
        SandboxError::SpawnFailure {
            interpreter: self.interpreter.clone(),
            message: e.to_string(),
        }
    }

    /// Spawns the shim, feeds it `payload` and collects its output, killing
    /// the process group at `limit`.
    fn invoke(&self, payload: &[u8], limit: Duration) -> Result<ChildRun, SandboxError> {
        let _slot = self.slots.acquire();
        let mut child = Command::new(&self.interpreter)
            .arg("-I")
            .arg(self.shim_path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .spawn()
            .map_err(|e| self.spawn_failure(e))?;
        let started = Instant::now();

        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload = payload.to_vec();
        let writer = thread::spawn(move || {
            let _ = stdin.write_all(&payload);
        });
        let cap = self.limits.max_stdout_bytes;
        let stdout = child.stdout.take().expect("piped stdout");
        let reader = thread::spawn(move || read_capped(stdout, cap));
        let stderr = child.stderr.take().expect("piped stderr");
        let err_reader = thread::spawn(move || read_capped(stderr, 64 * 1024));

        let timed_out = wait_or_kill(&mut child, started, limit);
        let _ = writer.join();
        let (stdout, overflowed) = reader.join().unwrap_or_default();
        let (stderr, _) = err_reader.join().unwrap_or_default();
        Ok(ChildRun {
            stdout,
            stderr,
            timed_out,
            overflowed,
        })
    }

    pub fn run_program(&self, program: &str, inputs: &[Grid]) -> Result<ExecOutcome, SandboxError> {
        if inputs.is_empty() {
            return Err(SandboxError::InvalidInput("no input grids".into()));
        }
        if inputs.len() > self.limits.max_cases {
            return Err(SandboxError::InvalidInput(format!(
                "{} cases exceed the limit of {}",
                inputs.len(),
                self.limits.max_cases
            )));
        }
        let request = json!({
            "protocol": PROTOCOL_VERSION,
            "program": program,
            "entry_name": ENTRY_NAME,
            "cases": inputs,
        });
        let run = self.invoke(&encode_frame(&request), self.limits.wall_clock())?;
        if run.timed_out {
            return Ok(ExecOutcome {
                cases: vec![CaseResult::Timeout; inputs.len()],
                process: ProcessStatus::KilledTimeout,
            });
        }
        if run.overflowed {
            return Ok(protocol_failure(
                inputs.len(),
                format!("child output exceeded {} bytes", self.limits.max_stdout_bytes),
            ));
        }
        Ok(match decode_response(&run.stdout, inputs.len()) {
            Ok(cases) => ExecOutcome {
                cases,
                process: ProcessStatus::Ok,
            },
            Err(reason) => {
                let tail = String::from_utf8_lossy(&run.stderr);
                let tail: String = tail.chars().rev().take(500).collect::<Vec<_>>().into_iter().rev().collect();
                protocol_failure(inputs.len(), format!("{reason}; stderr: {}", tail.trim()))
            }
        })
    }

    /// Checks interpreter presence and version, and that the shim echoes a
    /// handshake payload unchanged.
    pub fn probe_runtime(&self) -> Result<ProbeReport, SandboxError> {
        let out = Command::new(&self.interpreter)
            .arg("--version")
            .output()
            .map_err(|e| self.spawn_failure(e))?;
        let mut version = String::from_utf8_lossy(&out.stdout).trim().to_string();
        if version.is_empty() {
            version = String::from_utf8_lossy(&out.stderr).trim().to_string();
        }
        let token = "handshake \u{2713} {\"nested\": [1,2]}\n\ttabs";
        let run = self.invoke(
            &encode_frame(&json!({"protocol": PROTOCOL_VERSION, "echo": token})),
            Duration::from_secs(10),
        )?;
        if run.timed_out {
            return Err(SandboxError::Handshake("shim did not answer within 10s".into()));
        }
        let v = decode_frame(&run.stdout).map_err(SandboxError::Handshake)?;
        let echoed = v.get("echo").and_then(Value::as_str);
        if echoed != Some(token) {
            return Err(SandboxError::Handshake(format!("echo mismatch: {echoed:?}")));
        }
        Ok(ProbeReport {
            interpreter: self.interpreter.clone(),
            version,
            shim_path: self.shim_path().display().to_string(),
            echo_roundtrip: true,
        })
    }
}

impl Executor for ProcessSandbox {
    fn run(&self, program: &str, inputs: &[Grid]) -> Result<ExecOutcome, SandboxError> {
        self.run_program(program, inputs)
    }

    fn limits(&self) -> &ExecLimits {
        &self.limits
    }
}

fn protocol_failure(n: usize, reason: String) -> ExecOutcome {
    ExecOutcome {
        cases: vec![
            CaseResult::RuntimeError {
                message: format!("sandbox protocol error: {reason}"),
            };
            n
        ],
        process: ProcessStatus::ProtocolError(reason),
    }
}

fn read_capped(mut r: impl Read, cap: usize) -> (Vec<u8>, bool) {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    let mut overflowed = false;
    loop {
        match r.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if buf.len() + n > cap {
                    overflowed = true;
                    // keep draining so the child never blocks on a full pipe
                    continue;
                }
                buf.extend_from_slice(&chunk[..n]);
            }
        }
    }
    (buf, overflowed)
}

/// Polls the child until it exits or `limit` passes; on timeout kills the
/// whole process group and reaps the child. Returns whether it timed out.
fn wait_or_kill(child: &mut Child, started: Instant, limit: Duration) -> bool {
    let pgid = child.id() as libc::pid_t;
    loop {
        match child.try_wait() {
            Ok(Some(_)) => {
                // Reap stragglers the program may have forked.
                kill_group(pgid);
                return false;
            }
            Ok(None) => {}
            Err(_) => break,
        }
        if started.elapsed() >= limit {
            break;
        }
        thread::sleep(Duration::from_millis(5));
    }
    kill_group(pgid);
    let _ = child.kill();
    let _ = child.wait();
    true
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: killpg has no memory-safety preconditions; a stale group id
    // yields ESRCH, which is ignored.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

pub fn encode_frame(payload: &Value) -> Vec<u8> {
    let body = serde_json::to_vec(payload).expect("json value serializes");
    let mut out = format!("{FRAME_HEADER}{}\n", body.len()).into_bytes();
    out.extend_from_slice(&body);
    out.push(b'\n');
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<Value, String> {
    let mut reader = BufReader::new(bytes);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| format!("unreadable header: {e}"))?;
    let len: usize = header
        .strip_prefix(FRAME_HEADER)
        .ok_or_else(|| "missing frame header".to_string())?
        .trim()
        .parse()
        .map_err(|_| format!("bad frame length in {:?}", header.trim()))?;
    let mut body = vec![0u8; len];
    reader
        .read_exact(&mut body)
        .map_err(|_| "truncated frame body".to_string())?;
    serde_json::from_slice(&body).map_err(|e| format!("frame body is not JSON: {e}"))
}

/// Decodes a response frame into per-case results, validating grids.
pub fn decode_response(bytes: &[u8], expected_cases: usize) -> Result<Vec<CaseResult>, String> {
    let v = decode_frame(bytes)?;
    if v.get("protocol").and_then(Value::as_u64) != Some(PROTOCOL_VERSION) {
        return Err("wrong or missing protocol version".into());
    }
    if let Some(fatal) = v.get("fatal").and_then(Value::as_str) {
        return Err(format!("shim rejected request: {fatal}"));
    }
    let per_case = v
        .get("per_case")
        .and_then(Value::as_array)
        .ok_or_else(|| "response lacks per_case".to_string())?;
    if per_case.len() != expected_cases {
        return Err(format!(
            "response has {} cases, expected {expected_cases}",
            per_case.len()
        ));
    }
    per_case
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let text = |k: &str| c.get(k).and_then(Value::as_str).unwrap_or("").to_string();
            match c.get("status").and_then(Value::as_str) {
                Some("ok") => {
                    let raw = c.get("grid").ok_or_else(|| format!("case {i}: ok without grid"))?;
                    Ok(match Grid::from_json(raw) {
                        Ok(grid) => CaseResult::Grid { grid },
                        Err(description) => CaseResult::InvalidOutput { description },
                    })
                }
                Some("error") => Ok(CaseResult::RuntimeError { message: text("error") }),
                Some("invalid") => Ok(CaseResult::InvalidOutput { description: text("error") }),
                other => Err(format!("case {i}: unknown status {other:?}")),
            }
        })
        .collect()
}
