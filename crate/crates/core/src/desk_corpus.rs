//! Synthetic desk corpus: mock-backend tasks plus scripted fixer responses.
//!
//! Each scenario fixes, per fixer, the sequence of candidates submitted and
//! the expected trajectory summary under the default protocol. The seed only
//! changes cosmetic text (identifiers and comments), never behaviour.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::backend::{ExitStatus, MockEntry, MockRecord, MockScript, Stage, MOCK_SCRIPT_FILE};
use crate::classifier::{Bucket, Category};
use crate::corpus::{self, BrokenStart, Task, TaskSpec, MANUAL_SOURCE};
use crate::debug_loop::StopReason;
use crate::error::Result;
use crate::fixer::{FixerConfig, FixerKind};

pub const DESK_FIXERS: [&str; 3] = ["desk-a", "desk-b", "desk-c"];
pub const REFERENCE_MS: f64 = 3.0;
pub const CORPUS_DIR: &str = "corpus";
pub const FIXERS_DIR: &str = "fixers";
pub const FIXERS_FILE: &str = "fixers.json";
pub const SCENARIOS_FILE: &str = "scenarios.json";

/// Stems of the desk-a subset on which two-phase calls hit the budget
/// N + (K-1)|F| exactly: every phase-1 failure runs the full budget.
pub const FULL_BUDGET_SUBSET: [&str; 4] = ["desk_01_pass_first", "desk_06_max_iter", "desk_08_self_source", "desk_12_timing_fallback"];

const TIMING: &str = "^Kernel time: ([0-9.]+) ms";
const BUILD_CMD: &str = "nvcc -O2 -arch=sm_80 -o test test_main.cu solution.cu";

/// Scripted backend behaviour of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub enum Behavior {
    BuildFail(&'static str),
    TestFail {
        stdout: &'static str,
        sanitizer: Option<&'static str>,
    },
    Crash(&'static str),
    Timeout,
    /// Correct, with the per-launch times printed by the perf launches.
    Pass {
        ms: f64,
        launches: Option<Vec<f64>>,
        perf_build_ok: bool,
    },
    /// Never reaches the backend: the text carries a forbidden substring.
    AntiCheat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub behavior: Behavior,
    pub category: Category,
    pub signature: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expected {
    pub stop_reason: StopReason,
    pub passed_at: Option<usize>,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixerPlan {
    pub fixer: &'static str,
    /// Variant names by iteration; `None` means the fixer resubmits the
    /// broken kernel every time.
    pub submissions: Option<Vec<&'static str>>,
    pub expected: Expected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioScript {
    pub number: u32,
    pub name: &'static str,
    pub bucket: Bucket,
    pub source_model: &'static str,
    /// Index 0 is the broken start, named `broken`.
    pub variants: Vec<Variant>,
    pub plans: Vec<FixerPlan>,
}

impl ScenarioScript {
    pub fn stem(&self) -> String {
        format!("desk_{:02}_{}", self.number, self.name)
    }

    pub fn task_id(&self) -> String {
        format!("DESK/{:02}", self.number)
    }

    pub fn variant(&self, name: &str) -> &Variant {
        self.variants
            .iter()
            .find(|v| v.name == name)
            .unwrap_or_else(|| panic!("scenario {} has no variant {name}", self.name))
    }

    pub fn plan(&self, fixer: &str) -> &FixerPlan {
        self.plans.iter().find(|p| p.fixer == fixer).expect("plan per desk fixer")
    }

    /// Variant submitted by `fixer` at 1-based `iteration`.
    pub fn submission(&self, fixer: &str, iteration: usize) -> &Variant {
        match &self.plan(fixer).submissions {
            None => &self.variants[0],
            Some(seq) => self.variant(seq[(iteration - 1).min(seq.len() - 1)]),
        }
    }
}

fn v(name: &'static str, behavior: Behavior, category: Category, signature: &'static str) -> Variant {
    Variant {
        name,
        behavior,
        category,
        signature,
    }
}

fn fast(name: &'static str) -> Variant {
    pass(name, 2.0)
}

fn pass(name: &'static str, ms: f64) -> Variant {
    v(
        name,
        Behavior::Pass {
            ms,
            launches: None,
            perf_build_ok: true,
        },
        Category::Passed,
        "",
    )
}

fn syntax(name: &'static str) -> Variant {
    v(
        name,
        Behavior::BuildFail("solution.cu(14): error: syntax error near `}`"),
        Category::Buildability,
        "syntax_error",
    )
}

fn no_match(name: &'static str) -> Variant {
    v(
        name,
        Behavior::BuildFail("solution.cu(21): error: no matching function for call to `launch_tile(float*, int)`"),
        Category::Buildability,
        "no_matching_function",
    )
}

fn not_declared(name: &'static str) -> Variant {
    v(
        name,
        Behavior::BuildFail("solution.cu(9): error: 'blockDimX' was not declared in this scope"),
        Category::Buildability,
        "not_declared",
    )
}

fn ptxas(name: &'static str) -> Variant {
    v(
        name,
        Behavior::BuildFail("ptxas error   : Entry function uses too much shared data (0x12000 bytes, 0xc000 max)"),
        Category::Buildability,
        "ptxas_error",
    )
}

fn functional(name: &'static str, stdout: &'static str, signature: &'static str) -> Variant {
    v(
        name,
        Behavior::TestFail {
            stdout,
            sanitizer: None,
        },
        Category::FunctionalCorrectness,
        signature,
    )
}

fn differ(name: &'static str) -> Variant {
    functional(
        name,
        "input shape=1024x1024\nmax abs error: 0.37\nmean abs error: 0.012\nmismatches: [3, 17, 40]\noutputs differ from reference",
        "outputs_differ",
    )
}

fn wrong(name: &'static str) -> Variant {
    functional(name, "input shape=512x512\nwrong result at index 7", "wrong_result")
}

fn oom(name: &'static str) -> Variant {
    v(
        name,
        Behavior::Crash("CUDA error at solution.cu:88: out of memory (cudaErrorMemoryAllocation)\ninput shape=8192x8192"),
        Category::OutOfMemory,
        "cuda_oom",
    )
}

fn illegal(name: &'static str) -> Variant {
    v(
        name,
        Behavior::Crash("CUDA error at solution.cu:52: an illegal memory access was encountered (cudaErrorIllegalAddress)"),
        Category::IllegalMemoryAccess,
        "illegal_address",
    )
}

fn timeout(name: &'static str) -> Variant {
    v(name, Behavior::Timeout, Category::Timeout, "watchdog_timeout")
}

fn plan(fixer: &'static str, seq: &[&'static str], stop: StopReason, passed_at: Option<usize>, cats: &[Category]) -> FixerPlan {
    FixerPlan {
        fixer,
        submissions: Some(seq.to_vec()),
        expected: Expected {
            stop_reason: stop,
            passed_at,
            categories: cats.to_vec(),
        },
    }
}

fn lazy(fixer: &'static str, broken: Category) -> FixerPlan {
    FixerPlan {
        fixer,
        submissions: None,
        expected: Expected {
            stop_reason: StopReason::DuplicateCode,
            passed_at: None,
            categories: vec![broken, broken],
        },
    }
}

/// The scenario table. Expectations are for K=5, H=4, L3, p=0.7 and the
/// default stagnation thresholds.
pub fn scenarios() -> Vec<ScenarioScript> {
    use Category::{
        Buildability as B, EnvironmentDependency as Env, FunctionalCorrectness as F, IllegalMemoryAccess as Ill,
        Integration as Int, OutOfMemory as Oom, Passed as P, Timeout as T,
    };
    use StopReason::*;
    let s = |number, name, bucket, variants, plans| ScenarioScript {
        number,
        name,
        bucket,
        source_model: MANUAL_SOURCE,
        variants,
        plans,
    };

    vec![
        s(
            1,
            "pass_first",
            Bucket::CompileError,
            vec![syntax("broken"), fast("a1"), fast("b1"), fast("c1")],
            vec![
                plan("desk-a", &["a1"], Passed, Some(1), &[P]),
                plan("desk-b", &["b1"], Passed, Some(1), &[P]),
                plan("desk-c", &["c1"], Passed, Some(1), &[P]),
            ],
        ),
        s(
            2,
            "duplicate",
            Bucket::LogicError,
            vec![differ("broken"), wrong("a1")],
            vec![
                plan("desk-a", &["a1", "a1"], DuplicateCode, None, &[F, F]),
                lazy("desk-b", F),
                lazy("desk-c", F),
            ],
        ),
        s(
            3,
            "cycle",
            Bucket::MemoryCrash,
            vec![illegal("broken"), syntax("a1"), illegal("a2"), syntax("b1"), fast("b2")],
            vec![
                plan("desk-a", &["a1", "a2", "a1"], CodeCycle, None, &[B, Ill, B]),
                plan("desk-b", &["b1", "b2"], Passed, Some(2), &[B, P]),
                lazy("desk-c", Ill),
            ],
        ),
        s(
            4,
            "oscillation",
            Bucket::CompileError,
            vec![
                no_match("broken"),
                syntax("a1"),
                differ("a2"),
                not_declared("a3"),
                wrong("a4"),
                fast("b1"),
                syntax("c1"),
                fast("c2"),
            ],
            vec![
                plan("desk-a", &["a1", "a2", "a3", "a4"], CategoryOscillation, None, &[B, F, B, F]),
                plan("desk-b", &["b1"], Passed, Some(1), &[P]),
                plan("desk-c", &["c1", "c2"], Passed, Some(2), &[B, P]),
            ],
        ),
        s(
            5,
            "no_progress",
            Bucket::CompileError,
            vec![
                not_declared("broken"),
                not_declared("a1"),
                not_declared("a2"),
                not_declared("a3"),
                not_declared("b1"),
                syntax("b2"),
                fast("b3"),
                fast("c1"),
            ],
            vec![
                plan("desk-a", &["a1", "a2", "a3"], NoProgress, None, &[B, B, B]),
                plan("desk-b", &["b1", "b2", "b3"], Passed, Some(3), &[B, B, P]),
                plan("desk-c", &["c1"], Passed, Some(1), &[P]),
            ],
        ),
        s(
            6,
            "max_iter",
            Bucket::MemoryCrash,
            vec![
                oom("broken"),
                syntax("a1"),
                no_match("a2"),
                ptxas("a3"),
                oom("a4"),
                oom("a5"),
                syntax("b1"),
                ptxas("b2"),
                no_match("b3"),
                oom("b4"),
                fast("b5"),
                fast("c1"),
            ],
            vec![
                plan("desk-a", &["a1", "a2", "a3", "a4", "a5"], MaxIterations, None, &[B, B, B, Oom, Oom]),
                plan("desk-b", &["b1", "b2", "b3", "b4", "b5"], Passed, Some(5), &[B, B, B, Oom, P]),
                plan("desk-c", &["c1"], Passed, Some(1), &[P]),
            ],
        ),
        s(
            7,
            "perf_broken",
            Bucket::PerfBroken,
            vec![pass("broken", 6.0), pass("a1", 6.0), pass("a2", 2.5), pass("b1", 6.0), fast("c1")],
            vec![
                plan("desk-a", &["a1", "a2"], Passed, Some(2), &[P, P]),
                plan("desk-b", &["b1", "b1"], DuplicateCode, None, &[P, P]),
                plan("desk-c", &["c1"], Passed, Some(1), &[P]),
            ],
        ),
        ScenarioScript {
            source_model: "desk-a",
            ..s(
                8,
                "self_source",
                Bucket::LogicError,
                vec![
                    differ("broken"),
                    syntax("a1"),
                    no_match("a2"),
                    differ("a3"),
                    oom("a4"),
                    fast("a5"),
                    syntax("b1"),
                    fast("b2"),
                    syntax("c1"),
                    not_declared("c2"),
                    fast("c3"),
                ],
                vec![
                    plan("desk-a", &["a1", "a2", "a3", "a4", "a5"], Passed, Some(5), &[B, B, F, Oom, P]),
                    plan("desk-b", &["b1", "b2"], Passed, Some(2), &[B, P]),
                    plan("desk-c", &["c1", "c2", "c3"], Passed, Some(3), &[B, B, P]),
                ],
            )
        },
        s(
            9,
            "env",
            Bucket::CompileError,
            vec![
                v(
                    "broken",
                    Behavior::BuildFail("nvcc fatal   : Unsupported gpu architecture 'compute_999'"),
                    Env,
                    "unsupported_gpu_arch",
                ),
                v(
                    "a1",
                    Behavior::BuildFail("/usr/bin/ld: test_main.o: undefined reference to `main'\ncollect2: error: ld returned 1 exit status"),
                    Int,
                    "undefined_main",
                ),
                timeout("a2"),
                fast("a3"),
                fast("b1"),
                syntax("c1"),
                fast("c2"),
            ],
            vec![
                plan("desk-a", &["a1", "a2", "a3"], Passed, Some(3), &[Int, T, P]),
                plan("desk-b", &["b1"], Passed, Some(1), &[P]),
                plan("desk-c", &["c1", "c2"], Passed, Some(2), &[B, P]),
            ],
        ),
        s(
            10,
            "sanitizer",
            Bucket::MemoryCrash,
            vec![
                v("broken", Behavior::Crash("Segmentation fault (core dumped)"), Ill, "illegal_address"),
                v(
                    "a1",
                    Behavior::TestFail {
                        stdout: "input shape=256x256\noutputs differ from reference",
                        sanitizer: Some("========= Invalid __global__ write of size 4 bytes\n=========     at 0x1a0 in tile_kernel"),
                    },
                    Ill,
                    "illegal_address",
                ),
                oom("a2"),
                fast("a3"),
                syntax("b1"),
                fast("b2"),
                syntax("c1"),
                no_match("c2"),
                fast("c3"),
            ],
            vec![
                plan("desk-a", &["a1", "a2", "a3"], Passed, Some(3), &[Ill, Oom, P]),
                plan("desk-b", &["b1", "b2"], Passed, Some(2), &[B, P]),
                plan("desk-c", &["c1", "c2", "c3"], Passed, Some(3), &[B, B, P]),
            ],
        ),
        s(
            11,
            "fallthrough",
            Bucket::CompileError,
            vec![
                v(
                    "broken",
                    Behavior::BuildFail("zxqv unrecognized gibberish"),
                    B,
                    "unmatched_build_failure",
                ),
                functional("a1", "qwerty 42 blorp", "unmatched_runtime_failure"),
                fast("a2"),
                fast("b1"),
                functional("c1", "frobnicated 0x7f", "unmatched_runtime_failure"),
                fast("c2"),
            ],
            vec![
                plan("desk-a", &["a1", "a2"], Passed, Some(2), &[F, P]),
                plan("desk-b", &["b1"], Passed, Some(1), &[P]),
                plan("desk-c", &["c1", "c2"], Passed, Some(2), &[F, P]),
            ],
        ),
        s(
            12,
            "timing_fallback",
            Bucket::CompileError,
            vec![
                syntax("broken"),
                v(
                    "a1",
                    Behavior::Pass {
                        ms: 2.0,
                        launches: None,
                        perf_build_ok: false,
                    },
                    P,
                    "",
                ),
                v(
                    "b1",
                    Behavior::Pass {
                        ms: 2.0,
                        launches: Some(vec![2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.4]),
                        perf_build_ok: true,
                    },
                    P,
                    "",
                ),
                v(
                    "c1",
                    Behavior::Pass {
                        ms: 2.0,
                        launches: None,
                        perf_build_ok: false,
                    },
                    P,
                    "",
                ),
            ],
            vec![
                plan("desk-a", &["a1"], Passed, Some(1), &[P]),
                plan("desk-b", &["b1"], Passed, Some(1), &[P]),
                plan("desk-c", &["c1"], Passed, Some(1), &[P]),
            ],
        ),
        s(
            13,
            "unsolved",
            Bucket::Timeout,
            vec![timeout("broken"), timeout("a1"), timeout("a2"), timeout("a3")],
            vec![
                plan("desk-a", &["a1", "a2", "a3"], NoProgress, None, &[T, T, T]),
                lazy("desk-b", T),
                lazy("desk-c", T),
            ],
        ),
        s(
            14,
            "anti_cheat",
            Bucket::CompileError,
            vec![
                v(
                    "broken",
                    Behavior::BuildFail("solution.cu(30): error: identifier \"tile\" is undefined"),
                    B,
                    "identifier_undefined",
                ),
                v("a1", Behavior::AntiCheat, Int, "anti_cheat"),
                fast("a2"),
                fast("b1"),
            ],
            vec![
                plan("desk-a", &["a1", "a2"], Passed, Some(2), &[Int, P]),
                plan("desk-b", &["b1"], Passed, Some(1), &[P]),
                lazy("desk-c", B),
            ],
        ),
    ]
}

fn ok_build() -> MockRecord {
    MockRecord {
        stage: Stage::Build,
        exit: ExitStatus::Code(0),
        stdout: String::new(),
        stderr: String::new(),
        wall_time_ms: 850.0,
        sanitizer_log: None,
    }
}

fn timing_line(ms: f64) -> String {
    format!("Kernel time: {ms:.3} ms\n")
}

fn entry(variant: &Variant) -> MockEntry {
    let test = |exit, stage, stdout: String, stderr: &str, sanitizer: Option<&str>| MockRecord {
        stage,
        exit,
        stdout,
        stderr: stderr.to_string(),
        wall_time_ms: 140.0,
        sanitizer_log: sanitizer.map(str::to_string),
    };
    let (records, launch_stdout, perf_build_ok) = match &variant.behavior {
        Behavior::BuildFail(stderr) => (
            vec![MockRecord {
                stage: Stage::Build,
                exit: ExitStatus::Code(1),
                stdout: String::new(),
                stderr: format!("{stderr}\n"),
                wall_time_ms: 620.0,
                sanitizer_log: None,
            }],
            Vec::new(),
            true,
        ),
        Behavior::TestFail { stdout, sanitizer } => (
            vec![
                ok_build(),
                test(ExitStatus::Code(1), Stage::Test, format!("{stdout}\n"), "", *sanitizer),
            ],
            Vec::new(),
            true,
        ),
        Behavior::Crash(stderr) => (
            vec![ok_build(), test(ExitStatus::Code(139), Stage::Run, String::new(), &format!("{stderr}\n"), None)],
            Vec::new(),
            true,
        ),
        Behavior::Timeout => (
            vec![ok_build(), test(ExitStatus::Timeout, Stage::Run, String::new(), "", None)],
            Vec::new(),
            true,
        ),
        Behavior::Pass {
            ms,
            launches,
            perf_build_ok,
        } => (
            vec![
                ok_build(),
                test(
                    ExitStatus::Code(0),
                    Stage::Test,
                    format!("All checks passed\n{}", timing_line(*ms)),
                    "",
                    None,
                ),
            ],
            launches
                .as_ref()
                .map(|l| l.iter().map(|ms| timing_line(*ms)).collect())
                .unwrap_or_default(),
            *perf_build_ok,
        ),
        Behavior::AntiCheat => (vec![ok_build()], Vec::new(), true),
    };
    MockEntry {
        label: Some(variant.name.to_string()),
        records,
        launch_stdout,
        perf_build_ok,
    }
}

/// Error log recorded for the broken start: the failing stage's output.
fn error_log(variant: &Variant) -> String {
    let e = entry(variant);
    match e.records.iter().find(|r| r.exit != ExitStatus::Code(0)) {
        Some(r) if r.exit.is_timeout() => "TEST TIMEOUT after 120000 ms\n".to_string(),
        Some(r) => format!("{}{}", r.stderr, r.stdout),
        None => e
            .records
            .last()
            .map(|r| format!("{}correct but slower than the reference ({:.1} ms)\n", r.stdout, REFERENCE_MS))
            .unwrap_or_default(),
    }
}

const OPS: [&str; 6] = ["saxpy", "reduce", "stencil", "transpose", "softmax", "gemm_tile"];

/// Candidate text for a variant; distinct per (scenario, variant).
fn kernel_text(rng: &mut ChaCha8Rng, scenario: &ScenarioScript, variant: &Variant) -> String {
    let op = OPS[rng.random_range(0..OPS.len())];
    let tag: u32 = rng.random();
    let block = [64, 128, 256, 512][rng.random_range(0..4)];
    let mut s = format!(
        "// {} {} variant {}\n#include <cuda_runtime.h>\n\n__global__ void {op}_{tag:08x}(const float* in, float* out, int n) {{\n    int i = blockIdx.x * {block} + threadIdx.x;\n    if (i < n) out[i] = in[i];\n}}\n",
        scenario.stem(),
        op,
        variant.name
    );
    if variant.behavior == Behavior::AntiCheat {
        s.push_str("// fast path\nvoid gemm_fast() { cublasSgemm(nullptr, CUBLAS_OP_N, CUBLAS_OP_N, 0, 0, 0, nullptr, nullptr, 0, nullptr, 0, nullptr, nullptr, 0); }\n");
    }
    s
}

fn response_text(fixer: &str, iteration: usize, code: &str) -> String {
    format!("{fixer} revision {iteration}. Updated solution:\n\n```cuda\n{code}```\n")
}

#[derive(Debug, Clone)]
pub struct DeskCorpus {
    pub root: PathBuf,
    pub corpus: PathBuf,
    pub fixers_file: PathBuf,
}

/// Writes the corpus under `root`: `corpus/`, `fixers/<fixer>/<stem>/`,
/// `fixers.json` and `scenarios.json`.
pub fn generate_desk_corpus(root: &Path, seed: u64) -> Result<DeskCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus_root = root.join(CORPUS_DIR);
    let mut tasks = Vec::new();
    let mut summary = Vec::new();

    for sc in scenarios() {
        let stem = sc.stem();
        let texts: BTreeMap<&str, String> = sc
            .variants
            .iter()
            .map(|v| (v.name, kernel_text(&mut rng, &sc, v)))
            .collect();

        let mut candidates = BTreeMap::new();
        for v in &sc.variants {
            candidates.insert(crate::content_hash(&texts[v.name]), entry(v));
        }
        let script = MockScript {
            default: MockEntry {
                label: Some("unscripted".into()),
                records: vec![MockRecord {
                    stage: Stage::Build,
                    exit: ExitStatus::Code(1),
                    stdout: String::new(),
                    stderr: "solution.cu(1): error: expected a declaration\n".into(),
                    wall_time_ms: 500.0,
                    sanitizer_log: None,
                }],
                launch_stdout: Vec::new(),
                perf_build_ok: true,
            },
            candidates,
        };

        let bench = corpus_root.join(corpus::TESTBENCH_DIR).join(&stem);
        crate::write_file(
            &bench.join(MOCK_SCRIPT_FILE),
            serde_json::to_string_pretty(&script).expect("mock script serializes") + "\n",
        )?;
        crate::write_file(
            &bench.join("test_main.cu"),
            format!("// harness for {}\nint main() {{ return run_checks(); }}\n", sc.task_id()),
        )?;

        let broken = &sc.variants[0];
        let mut extras = serde_json::Map::new();
        extras.insert("scenario".into(), Value::String(sc.name.into()));
        let spec = TaskSpec {
            task_id: sc.task_id(),
            source: "desk".into(),
            backend: crate::backend::BackendKind::Mock,
            solution_file: "solution.cu".into(),
            build_cmd: BUILD_CMD.into(),
            test_cmd: "./test".into(),
            min_sm: 80,
            requires: Vec::new(),
            anti_cheat: vec!["cublasSgemm".into(), "cusolverDnSgetrf".into()],
            timing_parser: TIMING.into(),
            source_model: sc.source_model.into(),
            reference_mean_ms: Some(REFERENCE_MS),
            bucket: Some(sc.bucket),
            sanitizer_cmd: None,
            perf_build_cmd: None,
            extras,
        };
        tasks.push(Task {
            spec,
            broken_start: BrokenStart {
                prompt: format!(
                    "Task {}: the kernel in solution.cu must produce outputs matching the reference within tolerance 1e-4 and run at least as fast as the reference implementation. Edit only solution.cu.\n",
                    sc.task_id()
                ),
                broken_kernel: texts["broken"].clone(),
                error_log: error_log(broken),
                native_harness: bench,
            },
            stem: stem.clone(),
        });

        for p in &sc.plans {
            let dir = root.join(FIXERS_DIR).join(p.fixer).join(&stem);
            match &p.submissions {
                None => crate::write_file(&dir.join("fallback.txt"), response_text(p.fixer, 0, &texts["broken"]))?,
                Some(seq) => {
                    for (i, name) in seq.iter().enumerate() {
                        crate::write_file(
                            &dir.join(format!("iter_{}.txt", i + 1)),
                            response_text(p.fixer, i + 1, &texts[name]),
                        )?;
                    }
                }
            }
        }

        summary.push(json!({
            "task_id": sc.task_id(),
            "stem": stem,
            "bucket": sc.bucket,
            "source_model": sc.source_model,
            "expected": sc.plans.iter().map(|p| json!({
                "fixer": p.fixer,
                "stop_reason": p.expected.stop_reason,
                "passed_at": p.expected.passed_at,
                "categories": p.expected.categories,
            })).collect::<Vec<_>>(),
        }));
    }

    corpus::write_corpus(&corpus_root, &tasks)?;

    let fixers: Vec<FixerConfig> = DESK_FIXERS
        .iter()
        .map(|name| FixerConfig {
            endpoint: format!("{FIXERS_DIR}/{name}"),
            is_source_model: *name == "desk-a",
            kind: FixerKind::Scripted,
            ..FixerConfig::scripted(name, Path::new(""))
        })
        .collect();
    let fixers_file = root.join(FIXERS_FILE);
    crate::write_file(
        &fixers_file,
        serde_json::to_string_pretty(&json!({ "fixers": fixers })).expect("fixers serialize") + "\n",
    )?;
    crate::write_file(
        &root.join(SCENARIOS_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;

    Ok(DeskCorpus {
        root: root.to_path_buf(),
        corpus: corpus_root,
        fixers_file,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_reference_known_variants() {
        for sc in scenarios() {
            assert_eq!(sc.variants[0].name, "broken", "{}", sc.name);
            for p in &sc.plans {
                if let Some(seq) = &p.submissions {
                    assert_eq!(seq.len(), p.expected.categories.len(), "{} {}", sc.name, p.fixer);
                    for (i, name) in seq.iter().enumerate() {
                        assert_eq!(sc.variant(name).category, p.expected.categories[i], "{} {}", sc.name, p.fixer);
                    }
                }
            }
            assert_eq!(sc.plans.len(), DESK_FIXERS.len());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_desk_corpus(a.path(), 0).unwrap();
        generate_desk_corpus(b.path(), 0).unwrap();
        let snap = |root: &Path| {
            let mut files = BTreeMap::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in std::fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        files.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
                    }
                }
            }
            files
        };
        assert_eq!(snap(a.path()), snap(b.path()));
    }
}
