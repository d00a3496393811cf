//! Task manifests, broken-start workspaces, reproducibility checks and
//! difficulty tiers.
//!
//! On-disk layout of a corpus root:
//!
//! ```text
//! input/<stem>.json        task manifest
//! prompts/<stem>.txt       task description
//! testbench/<stem>/        native harness; holds the broken <solution_file>
//! error_logs/<stem>.log    recorded failure evidence for the broken start
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backend::{self, BackendHandle, BackendKind};
use crate::classifier::{Bucket, Category, Classifier};
use crate::error::{Error, Result};
use crate::metrics::TaskOutcome;

pub const INPUT_DIR: &str = "input";
pub const PROMPTS_DIR: &str = "prompts";
pub const TESTBENCH_DIR: &str = "testbench";
pub const ERROR_LOGS_DIR: &str = "error_logs";

/// Value of `source_model` for hand-injected broken starts.
pub const MANUAL_SOURCE: &str = "manual";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub source: String,
    pub backend: BackendKind,
    pub solution_file: String,
    pub build_cmd: String,
    pub test_cmd: String,
    pub min_sm: u32,
    pub requires: Vec<String>,
    pub anti_cheat: Vec<String>,
    pub timing_parser: String,
    pub source_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_mean_ms: Option<f64>,
    /// Curation-time bucket of the broken start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<Bucket>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sanitizer_cmd: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perf_build_cmd: Option<String>,
    /// Unrecognised manifest keys, kept verbatim and in order.
    #[serde(flatten)]
    pub extras: Map<String, Value>,
}

impl TaskSpec {
    pub fn parse(text: &str, path: &Path) -> Result<TaskSpec> {
        let cleaned = fold_wrapped_strings(text);
        let value: Value = serde_json::from_str(&cleaned)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        let Value::Object(mut obj) = value else {
            return Err(manifest_err(path, "<root>", "expected a JSON object"));
        };

        let spec = TaskSpec {
            task_id: req_str(&mut obj, path, "task_id")?,
            source: req_str(&mut obj, path, "source")?,
            backend: {
                let raw = req_str(&mut obj, path, "backend")?;
                raw.parse()
                    .map_err(|_| manifest_err(path, "backend", &format!("unknown backend `{raw}`")))?
            },
            solution_file: req_str(&mut obj, path, "solution_file")?,
            build_cmd: req_str(&mut obj, path, "build_cmd")?,
            test_cmd: req_str(&mut obj, path, "test_cmd")?,
            min_sm: match obj.shift_remove("min_sm") {
                Some(Value::Number(n)) => n
                    .as_u64()
                    .and_then(|v| u32::try_from(v).ok())
                    .ok_or_else(|| manifest_err(path, "min_sm", "expected a non-negative integer"))?,
                Some(_) => return Err(manifest_err(path, "min_sm", "expected an integer")),
                None => return Err(manifest_err(path, "min_sm", "missing")),
            },
            requires: str_list(&mut obj, path, "requires", true)?,
            anti_cheat: str_list(&mut obj, path, "anti_cheat", true)?,
            timing_parser: req_str(&mut obj, path, "timing_parser")?,
            source_model: opt_str(&mut obj, path, "source_model")?
                .unwrap_or_else(|| MANUAL_SOURCE.to_string()),
            reference_mean_ms: match obj.shift_remove("reference_mean_ms") {
                None | Some(Value::Null) => None,
                Some(Value::Number(n)) => n.as_f64(),
                Some(_) => return Err(manifest_err(path, "reference_mean_ms", "expected a number")),
            },
            bucket: match opt_str(&mut obj, path, "bucket")? {
                None => None,
                Some(b) => Some(
                    b.parse()
                        .map_err(|_| manifest_err(path, "bucket", &format!("unknown bucket `{b}`")))?,
                ),
            },
            sanitizer_cmd: opt_str(&mut obj, path, "sanitizer_cmd")?,
            perf_build_cmd: opt_str(&mut obj, path, "perf_build_cmd")?,
            extras: obj,
        };
        spec.check(path)?;
        Ok(spec)
    }

    fn check(&self, path: &Path) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(manifest_err(path, "task_id", "must be non-empty"));
        }
        if self.solution_file.is_empty() {
            return Err(manifest_err(path, "solution_file", "must be non-empty"));
        }
        if self.anti_cheat.iter().any(|s| s.is_empty()) {
            return Err(manifest_err(path, "anti_cheat", "entries must be non-empty"));
        }
        if let Some(r) = self.reference_mean_ms {
            if !(r > 0.0 && r.is_finite()) {
                return Err(manifest_err(path, "reference_mean_ms", "must be positive"));
            }
        }
        backend::timing_regex(&self.timing_parser)
            .map_err(|e| manifest_err(path, "timing_parser", &e.to_string()))?;
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("TaskSpec serializes");
        s.push('\n');
        s
    }
}

fn manifest_err(path: &Path, field: &str, message: &str) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn req_str(obj: &mut Map<String, Value>, path: &Path, field: &str) -> Result<String> {
    opt_str(obj, path, field)?.ok_or_else(|| manifest_err(path, field, "missing"))
}

fn opt_str(obj: &mut Map<String, Value>, path: &Path, field: &str) -> Result<Option<String>> {
    match obj.shift_remove(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(manifest_err(path, field, "expected a string")),
    }
}

fn str_list(obj: &mut Map<String, Value>, path: &Path, field: &str, required: bool) -> Result<Vec<String>> {
    match obj.shift_remove(field) {
        None if required => Err(manifest_err(path, field, "missing")),
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                _ => Err(manifest_err(path, field, "expected a list of strings")),
            })
            .collect(),
        Some(_) => Err(manifest_err(path, field, "expected a list of strings")),
    }
}

/// Hand-edited manifests sometimes wrap long command strings across lines.
/// Inside string literals, a raw newline plus the following indentation is
/// folded into a single space; everything else is left untouched.
fn fold_wrapped_strings(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if in_string {
            if escaped {
                escaped = false;
                out.push(c);
            } else if c == '\\' {
                escaped = true;
                out.push(c);
            } else if c == '"' {
                in_string = false;
                out.push(c);
            } else if c == '\n' || c == '\r' {
                while out.ends_with([' ', '\t']) {
                    out.pop();
                }
                while matches!(chars.peek(), Some(' ' | '\t' | '\n' | '\r')) {
                    chars.next();
                }
                out.push(' ');
            } else {
                out.push(c);
            }
        } else {
            if c == '"' {
                in_string = true;
            }
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokenStart {
    pub prompt: String,
    pub broken_kernel: String,
    pub error_log: String,
    pub native_harness: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub broken_start: BrokenStart,
    /// File stem shared by the manifest, prompt, testbench and error log.
    pub stem: String,
}

#[derive(Debug)]
pub struct LoadError {
    pub stem: String,
    pub error: Error,
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stem, self.error)
    }
}

#[derive(Debug, Default)]
pub struct LoadReport {
    /// Sorted by task_id.
    pub tasks: Vec<Task>,
    pub errors: Vec<LoadError>,
}

/// Loads every task under `root`. Per-task problems are collected in
/// `errors`; only an unreadable root is fatal.
pub fn load_corpus(root: &Path) -> Result<LoadReport> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus root is not a directory"),
        ));
    }
    let mut stems = BTreeSet::new();
    for sub in [INPUT_DIR, PROMPTS_DIR, TESTBENCH_DIR] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let stem = match sub {
                INPUT_DIR => name.strip_suffix(".json").map(str::to_string),
                PROMPTS_DIR => name.strip_suffix(".txt").map(str::to_string),
                _ => entry.path().is_dir().then_some(name),
            };
            if let Some(stem) = stem {
                stems.insert(stem);
            }
        }
    }

    let mut report = LoadReport::default();
    for stem in stems {
        match load_task(root, &stem) {
            Ok(task) => report.tasks.push(task),
            Err(error) => report.errors.push(LoadError { stem, error }),
        }
    }
    report.tasks.sort_by(|a, b| a.spec.task_id.cmp(&b.spec.task_id));
    let mut seen = BTreeSet::new();
    let mut dups = Vec::new();
    report.tasks.retain(|t| {
        if seen.insert(t.spec.task_id.clone()) {
            true
        } else {
            dups.push(LoadError {
                stem: t.stem.clone(),
                error: manifest_err(&root.join(INPUT_DIR), "task_id", &format!("duplicate `{}`", t.spec.task_id)),
            });
            false
        }
    });
    report.errors.extend(dups);
    Ok(report)
}

pub fn load_task(root: &Path, stem: &str) -> Result<Task> {
    let manifest = root.join(INPUT_DIR).join(format!("{stem}.json"));
    let spec = TaskSpec::parse(&crate::read_to_string(&manifest)?, &manifest)?;
    let prompt = crate::read_to_string(&root.join(PROMPTS_DIR).join(format!("{stem}.txt")))?;
    let native_harness = root.join(TESTBENCH_DIR).join(stem);
    if !native_harness.is_dir() {
        return Err(Error::io(
            &native_harness,
            std::io::Error::new(std::io::ErrorKind::NotFound, "testbench directory missing"),
        ));
    }
    let broken_kernel = crate::read_to_string(&native_harness.join(&spec.solution_file))?;
    let error_log = crate::read_to_string(&root.join(ERROR_LOGS_DIR).join(format!("{stem}.log")))?;
    Ok(Task {
        spec,
        broken_start: BrokenStart {
            prompt,
            broken_kernel,
            error_log,
            native_harness,
        },
        stem: stem.to_string(),
    })
}

/// Writes tasks under `root` in the layout `load_corpus` reads. Testbench
/// contents are copied unless they already live at the destination.
pub fn write_corpus(root: &Path, tasks: &[Task]) -> Result<()> {
    for task in tasks {
        let stem = &task.stem;
        crate::write_file(&root.join(INPUT_DIR).join(format!("{stem}.json")), task.spec.to_json_pretty())?;
        crate::write_file(&root.join(PROMPTS_DIR).join(format!("{stem}.txt")), &task.broken_start.prompt)?;
        crate::write_file(
            &root.join(ERROR_LOGS_DIR).join(format!("{stem}.log")),
            &task.broken_start.error_log,
        )?;
        let bench = root.join(TESTBENCH_DIR).join(stem);
        let same = match (bench.canonicalize(), task.broken_start.native_harness.canonicalize()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        if !same && task.broken_start.native_harness.is_dir() {
            backend::copy_tree(&task.broken_start.native_harness, &bench)?;
        }
        crate::write_file(&bench.join(&task.spec.solution_file), &task.broken_start.broken_kernel)?;
    }
    Ok(())
}

/// Hash identifying the corpus content: manifests and broken kernels in
/// task_id order.
pub fn corpus_fingerprint(tasks: &[Task]) -> String {
    let mut buf = String::new();
    for t in tasks {
        buf.push_str(&t.spec.to_json_pretty());
        buf.push_str(&crate::content_hash(&t.broken_start.broken_kernel));
        buf.push('\n');
    }
    crate::content_hash(&buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationStatus {
    Reproducible,
    NotReproducible,
    Unverifiable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub task_id: String,
    pub status: ValidationStatus,
    /// Bucket observed on each of the two executions.
    pub observed: Vec<Bucket>,
    pub categories: Vec<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ValidationVerdict {
    pub fn reproducible(&self) -> bool {
        self.status == ValidationStatus::Reproducible
    }
}

/// Runs the broken kernel twice and checks that it fails the same way both
/// times. Correct-but-slow starts count as failing when the gate `p` rejects
/// them.
pub fn validate_task(
    task: &Task,
    handle: &BackendHandle,
    classifier: &Classifier,
    gate_p: f64,
) -> Result<ValidationVerdict> {
    let handle = handle.for_task(&task.spec);
    let mut verdict = ValidationVerdict {
        task_id: task.spec.task_id.clone(),
        status: ValidationStatus::Unverifiable,
        observed: Vec::new(),
        categories: Vec::new(),
        reason: None,
    };
    if !handle.available(task) {
        verdict.reason = Some(format!("backend {} unavailable for this task", handle.kind));
        return Ok(verdict);
    }
    for _ in 0..2 {
        let (category, bucket) = evaluate_once(task, &handle, classifier, gate_p)?;
        verdict.categories.push(category);
        verdict.observed.push(bucket);
    }
    let (a, b) = (verdict.observed[0], verdict.observed[1]);
    if a == Bucket::Passed || b == Bucket::Passed {
        verdict.status = ValidationStatus::NotReproducible;
        verdict.reason = Some("broken start passes".into());
    } else if verdict.categories[0] != verdict.categories[1] || a != b {
        verdict.status = ValidationStatus::NotReproducible;
        verdict.reason = Some(format!(
            "categories differ across runs: {} vs {}",
            verdict.categories[0], verdict.categories[1]
        ));
    } else {
        verdict.status = ValidationStatus::Reproducible;
    }
    Ok(verdict)
}

fn evaluate_once(
    task: &Task,
    handle: &BackendHandle,
    classifier: &Classifier,
    gate_p: f64,
) -> Result<(Category, Bucket)> {
    let candidate = &task.broken_start.broken_kernel;
    let pre = backend::preflight(task, candidate);
    let outcomes = if pre.failed() {
        vec![pre]
    } else {
        backend::execute_candidate(handle, task, candidate)?
    };
    let verdict = classifier.classify_iteration(&outcomes);
    if verdict.category != Category::Passed {
        return Ok((verdict.category, verdict.bucket));
    }
    let speedup = crate::timing::speedup_for(handle, task, candidate, &outcomes, crate::timing::DEFAULT_LAUNCHES)
        .ok()
        .flatten()
        .map(|m| m.speedup);
    let gate = crate::debug_loop::apply_perf_gate(speedup, gate_p);
    Ok((Category::Passed, crate::classifier::collapse_to_bucket(Category::Passed, !gate)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    L1,
    L2,
    L3,
    L4,
    L5,
}

impl Tier {
    pub const ALL: [Tier; 5] = [Tier::L1, Tier::L2, Tier::L3, Tier::L4, Tier::L5];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::L1 => "L1",
            Tier::L2 => "L2",
            Tier::L3 => "L3",
            Tier::L4 => "L4",
            Tier::L5 => "L5",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTier {
    pub tier: Tier,
    pub solver_count: usize,
    /// Mean first-pass iteration over solvers; only for L1/L2.
    pub mean_iterations: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TierInduction {
    pub tiers: BTreeMap<String, DifficultyTier>,
    /// Tasks lacking an outcome for some panel fixer.
    pub excluded: Vec<String>,
}

/// Difficulty tiers from panel outcomes. Tiers use absolute solver counts:
/// everyone solves (L1 when the mean first-pass iteration is at most 2, else
/// L2), 3–5 solvers (L3), 1–2 (L4), none (L5). The 3–5 band assumes a
/// six-member panel; larger panels put anything between 3 and n−1 in L3.
pub fn induce_tiers(outcomes: &[TaskOutcome], panel: &[String]) -> Result<TierInduction> {
    if panel.is_empty() {
        return Err(Error::PanelRequired);
    }
    let members: BTreeSet<&str> = panel.iter().map(String::as_str).collect();
    let mut by_task: BTreeMap<&str, BTreeMap<&str, Option<usize>>> = BTreeMap::new();
    for o in outcomes {
        if members.contains(o.fixer_name.as_str()) {
            by_task
                .entry(o.task_id.as_str())
                .or_default()
                .insert(o.fixer_name.as_str(), o.passed_at);
        }
    }
    let mut induction = TierInduction::default();
    for (task_id, per_fixer) in by_task {
        if per_fixer.len() != members.len() {
            induction.excluded.push(task_id.to_string());
            continue;
        }
        let passes: Vec<usize> = per_fixer.values().filter_map(|p| *p).collect();
        let solvers = passes.len();
        let tier = if solvers == members.len() {
            let mean = passes.iter().sum::<usize>() as f64 / solvers as f64;
            DifficultyTier {
                tier: if mean <= 2.0 { Tier::L1 } else { Tier::L2 },
                solver_count: solvers,
                mean_iterations: Some(mean),
            }
        } else {
            DifficultyTier {
                tier: match solvers {
                    0 => Tier::L5,
                    1 | 2 => Tier::L4,
                    _ => Tier::L3,
                },
                solver_count: solvers,
                mean_iterations: None,
            }
        };
        induction.tiers.insert(task_id.to_string(), tier);
    }
    Ok(induction)
}
