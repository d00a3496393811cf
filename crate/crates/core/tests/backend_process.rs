//! Shell runner, GPU lock, sandbox and remote fixer behaviour against real
//! processes and sockets.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use repairbench::backend::{self, BackendHandle, BackendKind, ExitStatus, Stage};
use repairbench::classifier::Category;
use repairbench::corpus::{self, BrokenStart, Task, TaskSpec};
use repairbench::debug_loop::{self, LoopEnv, ProtocolConfig, StopReason};
use repairbench::desk_corpus;
use repairbench::error::Error;
use repairbench::fixer::{load_fixers, Fixer, FixerConfig, FixerKind, RemoteFixer, RequestContext};

fn shell_task(root: &Path, build_cmd: &str, test_cmd: &str) -> Task {
    let spec = TaskSpec {
        task_id: "SH/1".into(),
        source: "local".into(),
        backend: BackendKind::RawCompiler,
        solution_file: "solution.cu".into(),
        build_cmd: build_cmd.into(),
        test_cmd: test_cmd.into(),
        min_sm: 0,
        requires: Vec::new(),
        anti_cheat: Vec::new(),
        timing_parser: "time=([0-9.]+)".into(),
        source_model: "manual".into(),
        reference_mean_ms: None,
        bucket: None,
        sanitizer_cmd: None,
        perf_build_cmd: None,
        extras: Default::default(),
    };
    let task = Task {
        spec,
        broken_start: BrokenStart {
            prompt: "fix it\n".into(),
            broken_kernel: "broken\n".into(),
            error_log: "error\n".into(),
            native_harness: root.join(corpus::TESTBENCH_DIR).join("sh1"),
        },
        stem: "sh1".into(),
    };
    corpus::write_corpus(root, std::slice::from_ref(&task)).unwrap();
    let mut loaded = corpus::load_corpus(root).unwrap();
    assert!(loaded.errors.is_empty(), "{:?}", loaded.errors);
    loaded.tasks.remove(0)
}

fn handle(workdir: &Path) -> BackendHandle {
    BackendHandle {
        test_timeout_s: 1,
        build_timeout_s: 5,
        ..BackendHandle::new(BackendKind::RawCompiler, workdir)
    }
}

fn process_alive(pid: u32) -> bool {
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => {
            let state = stat.rsplit(')').next().unwrap_or("").split_whitespace().next();
            !matches!(state, Some("Z") | Some("X"))
        }
        Err(_) => false,
    }
}

#[test]
fn timeout_kills_whole_process_group() {
    let dir = tempfile::tempdir().unwrap();
    let pid_file = dir.path().join("bg.pid");
    let test_cmd = format!("sleep 30 & echo $! > {}; sleep 30", pid_file.display());
    let task = shell_task(&dir.path().join("corpus"), "true", &test_cmd);
    let h = handle(&dir.path().join("work"));

    let start = Instant::now();
    let outs = backend::execute_candidate(&h, &task, "candidate\n").unwrap();
    assert!(start.elapsed() < Duration::from_secs(10));
    let test = outs.last().unwrap();
    assert_eq!(test.exit_status, ExitStatus::Timeout);
    assert_eq!(test.stage, Stage::Run);
    assert!(test.wall_time_ms >= 1000.0);

    let pid: u32 = std::fs::read_to_string(&pid_file).unwrap().trim().parse().unwrap();
    let deadline = Instant::now() + Duration::from_secs(2);
    while process_alive(pid) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(!process_alive(pid), "background child {pid} survived the timeout");
}

#[test]
fn build_failure_stops_before_test() {
    let dir = tempfile::tempdir().unwrap();
    let task = shell_task(
        &dir.path().join("corpus"),
        "echo 'solution.cu(1): error: expected a declaration' >&2; exit 2",
        "echo should-not-run",
    );
    let outs = backend::execute_candidate(&handle(&dir.path().join("work")), &task, "x\n").unwrap();
    assert_eq!(outs.len(), 1);
    assert_eq!(outs[0].stage, Stage::Build);
    assert_eq!(outs[0].exit_status, ExitStatus::Code(2));
    assert!(outs[0].stderr.contains("expected a declaration"));
}

#[test]
fn signal_death_is_a_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let task = shell_task(&dir.path().join("corpus"), "true", "kill -SEGV $$");
    let outs = backend::execute_candidate(&handle(&dir.path().join("work")), &task, "x\n").unwrap();
    let test = outs.last().unwrap();
    assert_eq!(test.stage, Stage::Run);
    assert_eq!(test.exit_status, ExitStatus::Code(128 + 11));
}

#[test]
fn gpu_lock_serialises_executions() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("canary.log");
    let test_cmd = format!(
        "echo start >> {0}; sleep 0.2; echo end >> {0}",
        log.display()
    );
    let task = shell_task(&dir.path().join("corpus"), "true", &test_cmd);
    let h = BackendHandle {
        gpu_lock_path: Some(dir.path().join("locks").join("gpu0.lock")),
        ..handle(&dir.path().join("work"))
    };
    std::thread::scope(|s| {
        for _ in 0..4 {
            s.spawn(|| {
                let outs = backend::execute_candidate(&h, &task, "x\n").unwrap();
                assert!(!outs.last().unwrap().failed());
            });
        }
    });
    let lines: Vec<String> = BufReader::new(std::fs::File::open(&log).unwrap())
        .lines()
        .map(Result::unwrap)
        .collect();
    assert_eq!(lines.len(), 8);
    for pair in lines.chunks(2) {
        assert_eq!(pair, ["start", "end"], "overlapping executions: {lines:?}");
    }
}

#[test]
fn sandboxes_are_fresh_and_testbench_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let test_cmd = "pwd; cat solution.cu; echo scribble > solution.cu; touch junk.o";
    let task = shell_task(&dir.path().join("corpus"), "true", test_cmd);
    let bench = task.broken_start.native_harness.clone();
    let before = snapshot(&bench);
    let h = handle(&dir.path().join("work"));

    let a = backend::execute_candidate(&h, &task, "first\n").unwrap();
    let b = backend::execute_candidate(&h, &task, "second\n").unwrap();
    let (a, b) = (&a.last().unwrap().stdout, &b.last().unwrap().stdout);
    let (wa, wb) = (a.lines().next().unwrap(), b.lines().next().unwrap());
    assert_ne!(wa, wb);
    assert!(Path::new(wa).starts_with(&h.workdir));
    assert!(a.contains("first") && b.contains("second"));
    assert_eq!(snapshot(&bench), before);
    assert!(!Path::new(wa).exists(), "sandbox was not cleaned up");
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap_or_default();
            (p, bytes)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn mock_backend_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let desk = desk_corpus::generate_desk_corpus(dir.path(), 5).unwrap();
    let tasks = corpus::load_corpus(&desk.corpus).unwrap().tasks;
    let h = BackendHandle::mock();
    for t in &tasks {
        let a = backend::execute_candidate(&h, t, &t.broken_start.broken_kernel).unwrap();
        let b = backend::execute_candidate(&h, t, &t.broken_start.broken_kernel).unwrap();
        assert_eq!(a, b, "{}", t.stem);
    }
}

fn remote(endpoint: String) -> RemoteFixer {
    RemoteFixer::new(FixerConfig {
        kind: FixerKind::Remote,
        endpoint,
        retries: 0,
        request_timeout_s: 1,
        ..FixerConfig::scripted("remote-stub", Path::new(""))
    })
    .unwrap()
}

/// Accepts connections and never answers.
fn silent_server() -> (String, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let h = std::thread::spawn(move || {
        let mut held = Vec::new();
        listener.set_nonblocking(true).unwrap();
        let until = Instant::now() + Duration::from_secs(15);
        while Instant::now() < until {
            match listener.accept() {
                Ok((s, _)) => held.push(s),
                Err(_) => std::thread::sleep(Duration::from_millis(10)),
            }
        }
    });
    (format!("http://{addr}/v1/chat/completions"), h)
}

/// Answers every request with a fixed chat-completions body.
fn echo_server(content: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let payload: serde_json::Value = serde_json::from_slice(&body).unwrap();
            assert!(payload["messages"].is_array());
            let resp = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
                .to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                resp.len(),
                resp
            )
            .unwrap();
        }
    });
    format!("http://{addr}/v1/chat/completions")
}

fn desk_task(root: &Path, stem: &str) -> Task {
    let desk = desk_corpus::generate_desk_corpus(root, 2).unwrap();
    corpus::load_corpus(&desk.corpus)
        .unwrap()
        .tasks
        .into_iter()
        .find(|t| t.stem == stem)
        .unwrap()
}

#[test]
fn unresponsive_endpoint_is_recorded_and_loop_continues() {
    let (endpoint, _server) = silent_server();
    let fixer = remote(endpoint);
    let dir = tempfile::tempdir().unwrap();
    let task = desk_task(dir.path(), "desk_06_max_iter");

    let ctx = RequestContext { task_id: task.spec.task_id.clone(), stem: task.stem.clone(), iteration: 1 };
    let cfg = ProtocolConfig { k_budget: 3, ..ProtocolConfig::default() };
    let env = LoopEnv::new(BackendHandle::mock());
    let bundle = debug_loop::TaskLoop::new(&cfg, &fixer, &task, &env).bundle();
    let start = Instant::now();
    let err = fixer.request_candidate(&ctx, &bundle, 0.7).unwrap_err();
    assert!(matches!(err, Error::FixerUnavailable { .. }), "{err:?}");
    assert!(start.elapsed() < Duration::from_secs(5));

    let traj = debug_loop::run_task_loop(&cfg, &fixer, &task, &env).unwrap();
    assert_eq!(traj.records.len(), 3);
    assert!(traj.records.iter().all(|r| r.fixer_unavailable() && r.category == Category::Buildability));
    assert_eq!(traj.stop_reason, StopReason::FixerUnavailable);
}

#[test]
fn remote_fixer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let task = desk_task(dir.path(), "desk_01_pass_first");
    // Reuse the scripted first submission so the mock backend recognises it.
    let fixers = load_fixers(&dir.path().join(desk_corpus::FIXERS_FILE)).unwrap();
    let scripted = fixers[0].build().unwrap();
    let ctx = RequestContext { task_id: task.spec.task_id.clone(), stem: task.stem.clone(), iteration: 1 };
    let cfg = ProtocolConfig::default();
    let env = LoopEnv::new(BackendHandle::mock());
    let bundle = debug_loop::TaskLoop::new(&cfg, scripted.as_ref(), &task, &env).bundle();
    let response = scripted.request_candidate(&ctx, &bundle, 0.7).unwrap();
    let content: &'static str = Box::leak(response.into_boxed_str());

    let fixer = remote(echo_server(content));
    let traj = debug_loop::run_task_loop(&cfg, &fixer, &task, &env).unwrap();
    assert_eq!(traj.stop_reason, StopReason::Passed);
    assert_eq!(traj.passed_at(), Some(1));
}
