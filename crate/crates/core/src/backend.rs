//! Candidate execution: pre-flight checks, copy-on-run sandboxes, per-stage
//! timeouts, the per-GPU advisory lock, and a deterministic mock backend.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Read;
use std::os::unix::io::AsRawFd;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use wait_timeout::ChildExt;

use crate::corpus::{Task, TaskSpec};
use crate::error::{Error, Result};

/// File name of the mock script inside a task's testbench directory.
pub const MOCK_SCRIPT_FILE: &str = "mock_script.json";

pub const DEFAULT_BUILD_TIMEOUT_S: u64 = 300;
pub const DEFAULT_TEST_TIMEOUT_S: u64 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "raw-compiler", alias = "nvcc", alias = "raw-nvcc")]
    RawCompiler,
    #[serde(rename = "project-makefile", alias = "make", alias = "makefile")]
    ProjectMakefile,
    #[serde(rename = "kb-harness", alias = "kernelbench", alias = "kb")]
    KbHarness,
    #[serde(rename = "mock")]
    Mock,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::RawCompiler => "raw-compiler",
            BackendKind::ProjectMakefile => "project-makefile",
            BackendKind::KbHarness => "kb-harness",
            BackendKind::Mock => "mock",
        }
    }

    /// Raw compiler, Makefile and KernelBench tasks all run through the same
    /// shell-command runner; only the mock differs.
    pub fn runs_commands(self) -> bool {
        self != BackendKind::Mock
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-compiler" | "nvcc" | "raw-nvcc" => Ok(BackendKind::RawCompiler),
            "project-makefile" | "make" | "makefile" => Ok(BackendKind::ProjectMakefile),
            "kb-harness" | "kernelbench" | "kb" => Ok(BackendKind::KbHarness),
            "mock" => Ok(BackendKind::Mock),
            other => Err(Error::Invalid(format!("unknown backend kind `{other}`"))),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preflight,
    Build,
    Run,
    Test,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Preflight => "preflight",
            Stage::Build => "build",
            Stage::Run => "run",
            Stage::Test => "test",
        }
    }
}

/// Process exit code, or the marker for a stage killed by its time budget.
/// Serialized as an integer or the string `"timeout"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Code(i32),
    Timeout,
}

impl ExitStatus {
    pub fn is_timeout(self) -> bool {
        self == ExitStatus::Timeout
    }

    pub fn success(self) -> bool {
        self == ExitStatus::Code(0)
    }
}

impl Serialize for ExitStatus {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ExitStatus::Code(c) => serializer.serialize_i32(*c),
            ExitStatus::Timeout => serializer.serialize_str("timeout"),
        }
    }
}

impl<'de> Deserialize<'de> for ExitStatus {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Code(i32),
            Marker(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Code(c) => Ok(ExitStatus::Code(c)),
            Raw::Marker(m) if m == "timeout" => Ok(ExitStatus::Timeout),
            Raw::Marker(m) => Err(serde::de::Error::custom(format!(
                "expected exit code or \"timeout\", got `{m}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub stage: Stage,
    pub exit_status: ExitStatus,
    pub stdout: String,
    pub stderr: String,
    pub wall_time_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sanitizer_log: Option<String>,
}

impl ExecutionOutcome {
    pub fn failed(&self) -> bool {
        !self.exit_status.success()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendHandle {
    pub kind: BackendKind,
    /// Parent directory for per-run sandboxes.
    pub workdir: PathBuf,
    pub build_timeout_s: u64,
    pub test_timeout_s: u64,
    #[serde(default)]
    pub gpu_lock_path: Option<PathBuf>,
    /// Compute capability of the local device, when known.
    #[serde(default)]
    pub available_sm: Option<u32>,
}

impl BackendHandle {
    pub fn new(kind: BackendKind, workdir: impl Into<PathBuf>) -> BackendHandle {
        BackendHandle {
            kind,
            workdir: workdir.into(),
            build_timeout_s: DEFAULT_BUILD_TIMEOUT_S,
            test_timeout_s: DEFAULT_TEST_TIMEOUT_S,
            gpu_lock_path: None,
            available_sm: None,
        }
    }

    pub fn mock() -> BackendHandle {
        BackendHandle::new(BackendKind::Mock, std::env::temp_dir())
    }

    pub fn validate(&self) -> Result<()> {
        if self.build_timeout_s == 0 || self.test_timeout_s == 0 {
            return Err(Error::Config("backend timeouts must be positive".into()));
        }
        Ok(())
    }

    /// Handle for a given task: identical settings, the task's backend kind.
    pub fn for_task(&self, spec: &TaskSpec) -> BackendHandle {
        BackendHandle {
            kind: spec.backend,
            ..self.clone()
        }
    }

    /// Whether this backend can execute the task here at all.
    pub fn available(&self, task: &Task) -> bool {
        match self.kind {
            BackendKind::Mock => task.broken_start.native_harness.join(MOCK_SCRIPT_FILE).is_file(),
            _ => {
                let program = task.spec.build_cmd.split_whitespace().next().unwrap_or("");
                !program.is_empty() && program_on_path(program, &task.broken_start.native_harness)
            }
        }
    }

    fn lock(&self) -> Result<Option<GpuLock>> {
        match (&self.gpu_lock_path, self.kind) {
            (_, BackendKind::Mock) | (None, _) => Ok(None),
            (Some(path), _) => GpuLock::acquire(path).map(Some),
        }
    }
}

fn program_on_path(program: &str, harness: &Path) -> bool {
    if program.contains('/') {
        return harness.join(program).exists() || Path::new(program).exists();
    }
    // make/sh builtins and shell keywords are not worth distinguishing here.
    if matches!(program, "cd" | "exit" | "true" | "false" | "echo" | "test" | "[") {
        return true;
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|dir| dir.join(program).is_file()))
        .unwrap_or(false)
}

/// Exclusive `flock` on a per-GPU lock file, released on drop.
#[derive(Debug)]
pub struct GpuLock {
    file: File,
}

impl GpuLock {
    pub fn acquire(path: &Path) -> Result<GpuLock> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        loop {
            // SAFETY: the descriptor is owned by `file` and stays open for the call.
            let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) };
            if rc == 0 {
                break;
            }
            let err = std::io::Error::last_os_error();
            if err.kind() != std::io::ErrorKind::Interrupted {
                return Err(Error::io(path, err));
            }
        }
        Ok(GpuLock { file })
    }
}

impl Drop for GpuLock {
    fn drop(&mut self) {
        // SAFETY: see `acquire`.
        unsafe {
            libc::flock(self.file.as_raw_fd(), libc::LOCK_UN);
        }
    }
}

/// Anti-cheat and workspace checks on a candidate, before anything runs.
pub fn preflight(task: &Task, candidate: &str) -> ExecutionOutcome {
    let fail = |stderr: String| ExecutionOutcome {
        stage: Stage::Preflight,
        exit_status: ExitStatus::Code(1),
        stdout: String::new(),
        stderr,
        wall_time_ms: 0.0,
        sanitizer_log: None,
    };
    if candidate.trim().is_empty() {
        return fail("empty candidate: no solution text was submitted".into());
    }
    let spec = &task.spec;
    if let Some(hit) = spec.anti_cheat.iter().find(|s| candidate.contains(s.as_str())) {
        return fail(format!(
            "anti-cheat violation: forbidden substring `{hit}` in {}",
            spec.solution_file
        ));
    }
    if !task.broken_start.native_harness.join(&spec.solution_file).is_file() {
        return fail(format!("{}: No such file in workspace", spec.solution_file));
    }
    ExecutionOutcome {
        stage: Stage::Preflight,
        exit_status: ExitStatus::Code(0),
        stdout: String::new(),
        stderr: String::new(),
        wall_time_ms: 0.0,
        sanitizer_log: None,
    }
}

/// Build then test the candidate; stops at the first failing stage.
pub fn execute_candidate(
    handle: &BackendHandle,
    task: &Task,
    candidate: &str,
) -> Result<Vec<ExecutionOutcome>> {
    match handle.kind {
        BackendKind::Mock => {
            let script = MockScript::load(&task.broken_start.native_harness)?;
            Ok(script.outcomes(candidate, handle))
        }
        _ => {
            let sandbox = Sandbox::prepare(handle, task, candidate)?;
            let _lock = handle.lock()?;
            let spec = &task.spec;
            let build = run_shell(
                &spec.build_cmd,
                sandbox.path(),
                Duration::from_secs(handle.build_timeout_s),
                Stage::Build,
            );
            if build.failed() {
                return Ok(vec![build]);
            }
            let mut test = run_shell(
                &spec.test_cmd,
                sandbox.path(),
                Duration::from_secs(handle.test_timeout_s),
                Stage::Test,
            );
            if test.failed() {
                if let Some(cmd) = &spec.sanitizer_cmd {
                    let aux = run_shell(
                        cmd,
                        sandbox.path(),
                        Duration::from_secs(handle.test_timeout_s),
                        Stage::Test,
                    );
                    test.sanitizer_log = Some(format!("{}{}", aux.stdout, aux.stderr));
                }
            }
            Ok(vec![build, test])
        }
    }
}

/// Outcome of the post hoc timing launches.
#[derive(Debug, Clone, PartialEq)]
pub enum LaunchReport {
    /// Stdout of each launch, in order.
    Launched(Vec<String>),
    PerfBuildFailed(String),
    IncompatibleArch,
}

/// Rebuild in perf mode and launch the test command `launches` times under
/// the GPU lock.
pub fn launch_timings(
    handle: &BackendHandle,
    task: &Task,
    candidate: &str,
    launches: usize,
) -> Result<LaunchReport> {
    match handle.kind {
        BackendKind::Mock => {
            let script = MockScript::load(&task.broken_start.native_harness)?;
            Ok(script.launches(candidate, launches))
        }
        _ => {
            if let Some(sm) = handle.available_sm {
                if task.spec.min_sm > sm {
                    return Ok(LaunchReport::IncompatibleArch);
                }
            }
            let sandbox = Sandbox::prepare(handle, task, candidate)?;
            let _lock = handle.lock()?;
            let spec = &task.spec;
            let build_cmd = spec.perf_build_cmd.as_deref().unwrap_or(&spec.build_cmd);
            let build = run_shell(
                build_cmd,
                sandbox.path(),
                Duration::from_secs(handle.build_timeout_s),
                Stage::Build,
            );
            if build.failed() {
                return Ok(LaunchReport::PerfBuildFailed(build.stderr));
            }
            let mut outputs = Vec::with_capacity(launches);
            for _ in 0..launches {
                let run = run_shell(
                    &spec.test_cmd,
                    sandbox.path(),
                    Duration::from_secs(handle.test_timeout_s),
                    Stage::Test,
                );
                outputs.push(run.stdout);
            }
            Ok(LaunchReport::Launched(outputs))
        }
    }
}

/// First line matching the task's timing pattern, parsed as milliseconds.
pub fn parse_timing(pattern: &str, stdout: &str) -> Result<Option<f64>> {
    let regex = timing_regex(pattern)?;
    Ok(stdout.lines().find_map(|line| {
        regex
            .captures(line)
            .and_then(|c| c.get(1))
            .and_then(|m| m.as_str().parse::<f64>().ok())
    }))
}

pub(crate) fn timing_regex(pattern: &str) -> Result<Regex> {
    let regex = Regex::new(pattern).map_err(|e| Error::Pattern {
        pattern: pattern.to_string(),
        message: e.to_string(),
    })?;
    if regex.captures_len() != 2 {
        return Err(Error::Config(format!(
            "timing_parser `{pattern}` must contain exactly one capture group"
        )));
    }
    Ok(regex)
}

/// A fresh copy of the testbench with the candidate written in place.
struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn prepare(handle: &BackendHandle, task: &Task, candidate: &str) -> Result<Sandbox> {
        std::fs::create_dir_all(&handle.workdir).map_err(|e| Error::io(&handle.workdir, e))?;
        let dir = tempfile::Builder::new()
            .prefix(&format!("{}-", task.stem))
            .tempdir_in(&handle.workdir)
            .map_err(|e| Error::io(&handle.workdir, e))?;
        copy_tree(&task.broken_start.native_harness, dir.path())?;
        crate::write_file(&dir.path().join(&task.spec.solution_file), candidate)?;
        Ok(Sandbox { dir })
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }
}

pub(crate) fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    let entries = std::fs::read_dir(from).map_err(|e| Error::io(from, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let src = entry.path();
        let dst = to.join(entry.file_name());
        let ty = entry.file_type().map_err(|e| Error::io(&src, e))?;
        if ty.is_dir() {
            copy_tree(&src, &dst)?;
        } else {
            std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
        }
    }
    Ok(())
}

fn drain<R: Read + Send + 'static>(reader: Option<R>) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut r) = reader {
            let _ = r.read_to_end(&mut buf);
        }
        buf
    })
}

/// Runs `sh -c cmd` in its own process group. Timed-out groups are killed.
/// A test command that times out or dies on a signal is reported as stage
/// `run`: the binary never reached its verdict.
fn run_shell(cmd: &str, dir: &Path, budget: Duration, stage: Stage) -> ExecutionOutcome {
    let start = Instant::now();
    let mut command = Command::new("sh");
    command
        .arg("-c")
        .arg(cmd)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let mut child = match command.spawn() {
        Ok(child) => child,
        Err(e) => {
            return ExecutionOutcome {
                stage,
                exit_status: ExitStatus::Code(127),
                stdout: String::new(),
                stderr: format!("failed to spawn `{cmd}`: {e}"),
                wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
                sanitizer_log: None,
            }
        }
    };
    let out = drain(child.stdout.take());
    let err = drain(child.stderr.take());

    let (exit_status, signalled) = match child.wait_timeout(budget) {
        Ok(Some(status)) => match (status.code(), status.signal()) {
            (Some(code), _) => (ExitStatus::Code(code), false),
            (None, Some(sig)) => (ExitStatus::Code(128 + sig), true),
            (None, None) => (ExitStatus::Code(-1), false),
        },
        Ok(None) | Err(_) => {
            // SAFETY: kill(2) on the child's process group; pid came from spawn.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            let _ = child.wait();
            (ExitStatus::Timeout, false)
        }
    };
    let stdout = String::from_utf8_lossy(&out.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&err.join().unwrap_or_default()).into_owned();
    let mut wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    if exit_status.is_timeout() {
        wall_time_ms = wall_time_ms.max(budget.as_secs_f64() * 1e3);
    }
    let stage = if stage == Stage::Test && (exit_status.is_timeout() || signalled) {
        Stage::Run
    } else {
        stage
    };
    ExecutionOutcome {
        stage,
        exit_status,
        stdout,
        stderr,
        wall_time_ms,
        sanitizer_log: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRecord {
    pub stage: Stage,
    pub exit: ExitStatus,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub wall_time_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sanitizer_log: Option<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub records: Vec<MockRecord>,
    /// Stdout of each timing launch; repeats the test-stage stdout when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub launch_stdout: Vec<String>,
    #[serde(default = "default_true")]
    pub perf_build_ok: bool,
}

/// Scripted backend behaviour, keyed by candidate content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub default: MockEntry,
    #[serde(default)]
    pub candidates: BTreeMap<String, MockEntry>,
}

impl MockScript {
    pub fn load(testbench: &Path) -> Result<MockScript> {
        let path = testbench.join(MOCK_SCRIPT_FILE);
        let text = crate::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn entry(&self, candidate: &str) -> &MockEntry {
        self.candidates
            .get(&crate::content_hash(candidate))
            .unwrap_or(&self.default)
    }

    pub fn outcomes(&self, candidate: &str, handle: &BackendHandle) -> Vec<ExecutionOutcome> {
        let mut outcomes = Vec::new();
        for record in &self.entry(candidate).records {
            let budget_ms = match record.stage {
                Stage::Build => handle.build_timeout_s,
                _ => handle.test_timeout_s,
            } as f64
                * 1e3;
            let wall_time_ms = if record.exit.is_timeout() {
                record.wall_time_ms.max(budget_ms)
            } else {
                record.wall_time_ms
            };
            let outcome = ExecutionOutcome {
                stage: record.stage,
                exit_status: record.exit,
                stdout: record.stdout.clone(),
                stderr: record.stderr.clone(),
                wall_time_ms,
                sanitizer_log: record.sanitizer_log.clone(),
            };
            let failed = outcome.failed();
            outcomes.push(outcome);
            if failed {
                break;
            }
        }
        outcomes
    }

    pub fn launches(&self, candidate: &str, launches: usize) -> LaunchReport {
        let entry = self.entry(candidate);
        if !entry.perf_build_ok {
            return LaunchReport::PerfBuildFailed("perf-mode build failed (scripted)".into());
        }
        if !entry.launch_stdout.is_empty() {
            return LaunchReport::Launched(
                entry.launch_stdout.iter().cycle().take(launches).cloned().collect(),
            );
        }
        let stdout = entry
            .records
            .iter()
            .rev()
            .find(|r| r.stage == Stage::Test)
            .map(|r| r.stdout.clone())
            .unwrap_or_default();
        LaunchReport::Launched(vec![stdout; launches])
    }
}
