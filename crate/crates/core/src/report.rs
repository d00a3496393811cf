//! Result directories, the per-iteration manifest, derived analysis tables
//! and the evaluation card.
//!
//! Layout of one run:
//!
//! ```text
//! <results>/<UTC timestamp>_<run_id>/
//!   config.json        frozen run configuration, written once
//!   tasks.json         task manifests as loaded
//!   manifest.jsonl     one row per iteration, grouped by (fixer, task)
//!   shards/            per-(fixer, task) rows while the run is in flight
//!   logs/<fixer>/<stem>/iter_N.log
//!   responses/<fixer>/<stem>/iter_N.txt
//!   solutions/<sha256>.txt
//!   analysis/          derived; recomputed by `analyze`
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendHandle, ExecutionOutcome};
use crate::classifier::{Bucket, Category, Classifier};
use crate::corpus::{self, Task, TaskSpec, Tier};
use crate::debug_loop::{
    self, CallCountReport, IterationRecord, LoopEnv, ProtocolConfig, RunRecorder, StopReason, Trajectory,
};
use crate::error::{Error, Result};
use crate::fixer::{FixerConfig, PROMPT_ASSEMBLY_VERSION};
use crate::metrics::{self, pct, MetricReport, TaskOutcome, FIX_RATE_BUCKETS};
use crate::robustness::{self, Axis, AxisSweepPlan, EvaluationCard, SweepGrid, GATE_SWEEP};

pub const CONFIG_FILE: &str = "config.json";
pub const TASKS_FILE: &str = "tasks.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SHARDS_DIR: &str = "shards";
pub const LOGS_DIR: &str = "logs";
pub const RESPONSES_DIR: &str = "responses";
pub const SOLUTIONS_DIR: &str = "solutions";
pub const ANALYSIS_DIR: &str = "analysis";
pub const SWEEP_FILE: &str = "sweep.json";
pub const CALLS_FILE: &str = "calls.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    TwoPhase,
    Naive,
}

/// Everything needed to re-launch a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub created_at: String,
    pub command: String,
    pub corpus_root: PathBuf,
    pub corpus_hash: String,
    pub protocol: ProtocolConfig,
    pub backend: BackendHandle,
    pub fixers: Vec<FixerConfig>,
    pub schedule: Schedule,
    pub concurrency: usize,
    pub classifier_version: String,
    pub prompt_assembly: String,
}

impl RunConfig {
    pub fn corpus_id(&self) -> String {
        self.corpus_root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.corpus_root.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub stem: String,
    pub spec: TaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub run_id: String,
    pub fixer: String,
    pub task_id: String,
    #[serde(flatten)]
    pub record: IterationRecord,
    /// Set on the last row of a trajectory only.
    pub stop_reason: Option<StopReason>,
    pub recorded_at: String,
}

fn path_part(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = crate::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

#[derive(Debug, Clone)]
pub struct ResultDir {
    pub path: PathBuf,
    pub run_id: String,
}

impl ResultDir {
    /// Creates a fresh `<timestamp>_<run_id>` directory under `root`.
    pub fn create(root: &Path, run_id: Option<&str>) -> Result<ResultDir> {
        let run_id = match run_id {
            Some(id) => path_part(id),
            None => uuid::Uuid::new_v4().simple().to_string()[..12].to_string(),
        };
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let name = format!("{}_{run_id}", Utc::now().format("%Y%m%dT%H%M%S%.3fZ"));
        let path = root.join(name);
        fs::create_dir(&path).map_err(|e| Error::io(&path, e))?;
        Ok(ResultDir { path, run_id })
    }

    pub fn open(path: &Path) -> Result<ResultDir> {
        let config: RunConfig = read_json(&path.join(CONFIG_FILE))?;
        Ok(ResultDir {
            path: path.to_path_buf(),
            run_id: config.run_id,
        })
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<()> {
        let p = self.path.join(CONFIG_FILE);
        if p.exists() {
            return Err(Error::Invalid(format!("{} already written", p.display())));
        }
        crate::write_file(&p, to_json(config))
    }

    pub fn write_tasks(&self, tasks: &[Task]) -> Result<()> {
        let entries: Vec<TaskEntry> = tasks
            .iter()
            .map(|t| TaskEntry {
                stem: t.stem.clone(),
                spec: t.spec.clone(),
            })
            .collect();
        crate::write_file(&self.path.join(TASKS_FILE), to_json(&entries))
    }

    pub fn recorder(&self) -> Arc<ResultRecorder> {
        Arc::new(ResultRecorder {
            dir: self.path.clone(),
            run_id: self.run_id.clone(),
        })
    }

    /// Merges shards into `manifest.jsonl`: fixers in config order, tasks in
    /// task-id order. Shards are removed afterwards.
    pub fn finalize(&self, fixers: &[String], tasks: &[Task]) -> Result<()> {
        let mut out = String::new();
        for f in fixers {
            for t in tasks {
                let shard = shard_path(&self.path, f, &t.stem);
                if shard.exists() {
                    out.push_str(&crate::read_to_string(&shard)?);
                }
            }
        }
        crate::write_file(&self.path.join(MANIFEST_FILE), out)?;
        let shards = self.path.join(SHARDS_DIR);
        if shards.exists() {
            fs::remove_dir_all(&shards).map_err(|e| Error::io(&shards, e))?;
        }
        Ok(())
    }
}

fn shard_path(dir: &Path, fixer: &str, stem: &str) -> PathBuf {
    dir.join(SHARDS_DIR)
        .join(path_part(fixer))
        .join(format!("{}.jsonl", path_part(stem)))
}

/// Writes artifacts as loops produce them. Each (fixer, task) loop owns its
/// shard, so appends never interleave.
#[derive(Debug)]
pub struct ResultRecorder {
    dir: PathBuf,
    run_id: String,
}

impl ResultRecorder {
    fn iter_path(&self, kind: &str, fixer: &str, task: &Task, iteration: usize, ext: &str) -> PathBuf {
        self.dir
            .join(kind)
            .join(path_part(fixer))
            .join(path_part(&task.stem))
            .join(format!("iter_{iteration}.{ext}"))
    }
}

impl RunRecorder for ResultRecorder {
    fn response(&self, fixer: &str, task: &Task, iteration: usize, raw: &str) -> Result<()> {
        crate::write_file(&self.iter_path(RESPONSES_DIR, fixer, task, iteration, "txt"), raw)
    }

    fn solution(&self, hash: &str, text: &str) -> Result<()> {
        let path = self.dir.join(SOLUTIONS_DIR).join(format!("{hash}.txt"));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    fn outcomes(&self, fixer: &str, task: &Task, iteration: usize, outcomes: &[ExecutionOutcome]) -> Result<()> {
        let mut log = String::new();
        for o in outcomes {
            let exit = serde_json::to_string(&o.exit_status).expect("exit status serializes");
            let _ = writeln!(
                log,
                "=== stage {} exit {exit} wall {:.1} ms ===",
                serde_json::to_value(o.stage).expect("stage serializes").as_str().unwrap_or("?"),
                o.wall_time_ms
            );
            let _ = writeln!(log, "--- stdout ---\n{}", o.stdout);
            let _ = writeln!(log, "--- stderr ---\n{}", o.stderr);
            if let Some(s) = &o.sanitizer_log {
                let _ = writeln!(log, "--- sanitizer ---\n{s}");
            }
        }
        crate::write_file(&self.iter_path(LOGS_DIR, fixer, task, iteration, "log"), log)
    }

    fn record(&self, fixer: &str, task: &Task, record: &IterationRecord, stop: Option<StopReason>) -> Result<()> {
        let row = ManifestRow {
            run_id: self.run_id.clone(),
            fixer: fixer.to_string(),
            task_id: task.spec.task_id.clone(),
            record: record.clone(),
            stop_reason: stop,
            recorded_at: Utc::now().to_rfc3339(),
        };
        let mut line = serde_json::to_string(&row).expect("manifest row serializes");
        line.push('\n');
        let path = shard_path(&self.dir, fixer, &task.stem);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
    }
}

/// A stored run, read back from its directory alone.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub tasks: Vec<TaskEntry>,
    pub rows: Vec<ManifestRow>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    let tasks: Vec<TaskEntry> = read_json(&dir.join(TASKS_FILE))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut text = String::new();
    if manifest.exists() {
        text = crate::read_to_string(&manifest)?;
    } else {
        // interrupted run: read the shards directly
        for f in &config.fixers {
            for t in &tasks {
                let shard = shard_path(dir, &f.name, &t.stem);
                if shard.exists() {
                    text.push_str(&crate::read_to_string(&shard)?);
                }
            }
        }
    }
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(manifest.display().to_string(), e)))
        .collect::<Result<Vec<ManifestRow>>>()?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config,
        tasks,
        rows,
    })
}

impl LoadedRun {
    pub fn fixer_names(&self) -> Vec<String> {
        self.config.fixers.iter().map(|f| f.name.clone()).collect()
    }

    /// Completed trajectories; a trajectory without a final row is skipped.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        let mut out = Vec::new();
        let mut cur: Option<Trajectory> = None;
        for row in &self.rows {
            let same = cur
                .as_ref()
                .is_some_and(|t| t.fixer_name == row.fixer && t.task_id == row.task_id);
            if !same {
                cur = Some(Trajectory {
                    task_id: row.task_id.clone(),
                    fixer_name: row.fixer.clone(),
                    records: Vec::new(),
                    stop_reason: StopReason::MaxIterations,
                });
            }
            let t = cur.as_mut().expect("set above");
            t.records.push(row.record.clone());
            if let Some(stop) = row.stop_reason {
                t.stop_reason = stop;
                out.push(cur.take().expect("set above"));
            }
        }
        out
    }

    /// Outcomes per fixer, gated at the run's p.
    pub fn outcomes(&self) -> BTreeMap<String, Vec<TaskOutcome>> {
        let specs: BTreeMap<&str, &TaskSpec> = self.tasks.iter().map(|t| (t.spec.task_id.as_str(), &t.spec)).collect();
        let mut by_fixer: BTreeMap<String, Vec<TaskOutcome>> =
            self.fixer_names().into_iter().map(|f| (f, Vec::new())).collect();
        for t in self.trajectories() {
            let o = TaskOutcome::from_trajectory(&t, specs.get(t.task_id.as_str()).copied());
            by_fixer.entry(t.fixer_name.clone()).or_default().push(o);
        }
        for v in by_fixer.values_mut() {
            v.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        }
        by_fixer
    }

    pub fn source_fixers(&self) -> BTreeSet<String> {
        let names: BTreeSet<String> = self.fixer_names().into_iter().collect();
        self.tasks
            .iter()
            .map(|t| t.spec.source_model.clone())
            .filter(|s| names.contains(s))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOptions {
    /// Re-gate the stored outcomes at this threshold instead of the run's.
    pub gate: Option<f64>,
    pub fix_rate_gate: f64,
    /// Panel for tier induction; all fixers in the run by default.
    pub panel: Option<Vec<String>>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            gate: None,
            fix_rate_gate: 0.0,
            panel: None,
        }
    }
}

/// Derived tables keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub gate: f64,
    pub reports: BTreeMap<String, MetricReport>,
    pub files: BTreeMap<String, String>,
}

/// Metric reports for a stored run, optionally re-gated.
pub fn run_reports(run: &LoadedRun, opts: &AnalysisOptions) -> (f64, BTreeMap<String, MetricReport>) {
    let run_p = run.config.protocol.perf_gate_p;
    let gate = opts.gate.unwrap_or(run_p);
    let k = run.config.protocol.k_budget;
    let reports = run
        .outcomes()
        .into_iter()
        .map(|(f, outs)| {
            let gated: Vec<TaskOutcome> = outs.iter().map(|o| o.regate(gate)).collect();
            let r = metrics::compute_report(&f, &gated, k, gate, opts.fix_rate_gate);
            (f, r)
        })
        .collect();
    (gate, reports)
}

/// Pure function of the result directory.
pub fn analyze(run: &LoadedRun, opts: &AnalysisOptions) -> Result<Analysis> {
    if let Some(g) = opts.gate {
        if !(g.is_finite() && g >= 0.0) {
            return Err(Error::Config(format!("gate must be a non-negative number, got {g}")));
        }
    }
    let (gate, reports) = run_reports(run, opts);
    let outcomes = run.outcomes();
    let run_p = run.config.protocol.perf_gate_p;
    let mut files = BTreeMap::new();

    files.insert("summary.txt".to_string(), render_summary(run, gate, &reports));
    files.insert("metric_snapshot.tsv".to_string(), render_metric_snapshot(&reports));
    files.insert("fix_rate_by_bucket.tsv".to_string(), render_fix_rate(&reports, &outcomes));
    files.insert("stagnation.tsv".to_string(), render_stagnation(&reports));
    files.insert("diagnostics.tsv".to_string(), render_diagnostics(&reports));
    files.insert("transitions.tsv".to_string(), render_transitions(&reports));
    files.insert(
        "axis_p.tsv".to_string(),
        render_gate_sweep(&outcomes, run.config.protocol.k_budget, run_p),
    );
    let panel = opts.panel.clone().unwrap_or_else(|| run.fixer_names());
    files.insert(
        "tiers.tsv".to_string(),
        render_tiers(&outcomes, &panel, run.config.protocol.k_budget, gate)?,
    );
    files.insert("reports.json".to_string(), to_json(&reports));
    Ok(Analysis { gate, reports, files })
}

/// Replaces `<dir>/analysis/` with freshly derived tables.
pub fn write_analysis(dir: &Path, analysis: &Analysis) -> Result<PathBuf> {
    let out = dir.join(ANALYSIS_DIR);
    if out.exists() {
        fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    for (name, body) in &analysis.files {
        crate::write_file(&out.join(name), body)?;
    }
    Ok(out)
}

/// Fixers by descending pass@k, ties by name.
fn ranked(reports: &BTreeMap<String, MetricReport>) -> Vec<&MetricReport> {
    let mut v: Vec<&MetricReport> = reports.values().collect();
    v.sort_by(|a, b| {
        b.pass_at_k
            .unwrap_or(-1.0)
            .total_cmp(&a.pass_at_k.unwrap_or(-1.0))
            .then_with(|| a.fixer.cmp(&b.fixer))
    });
    v
}

fn render_summary(run: &LoadedRun, gate: f64, reports: &BTreeMap<String, MetricReport>) -> String {
    let c = &run.config;
    let p = &c.protocol;
    let mut s = String::new();
    let _ = writeln!(s, "run_id\t{}", c.run_id);
    let _ = writeln!(s, "corpus\t{} ({})", c.corpus_id(), c.corpus_hash);
    let _ = writeln!(s, "tasks\t{}", run.tasks.len());
    let _ = writeln!(s, "fixers\t{}", run.fixer_names().join(", "));
    let _ = writeln!(
        s,
        "protocol\tK={} H={} feedback={} sampling={} T={} p={}",
        p.k_budget, p.history_depth, p.feedback_level, p.sampling, p.temperature, p.perf_gate_p
    );
    let _ = writeln!(
        s,
        "stagnation\toscillation {}-of-{}, no_progress c={}",
        p.stagnation.oscillation_min, p.stagnation.oscillation_window, p.stagnation.no_progress_run
    );
    let _ = writeln!(s, "analysis_gate\t{gate}");
    if gate > p.perf_gate_p {
        let _ = writeln!(s, "note\tgate stricter than the stored run; pass@k is a lower bound");
    }
    let _ = writeln!(s, "classifier\t{}", c.classifier_version);
    let _ = writeln!(s, "rows\t{}", run.rows.len());
    let flagged = run.rows.iter().filter(|r| r.record.cv_flagged).count();
    let fallback = run.rows.iter().filter(|r| r.record.timing_fallback).count();
    let _ = writeln!(s, "timing\t{flagged} cv-flagged, {fallback} single-launch fallback");
    let slow = run
        .rows
        .iter()
        .filter(|r| r.record.passed_correctness && r.record.speedup.is_some_and(|x| x < 1.0))
        .count();
    let _ = writeln!(s, "below_reference_correct\t{slow}");
    let _ = writeln!(s, "reports\t{}", reports.len());
    s
}

pub fn render_metric_snapshot(reports: &BTreeMap<String, MetricReport>) -> String {
    let k = reports.values().next().map(|r| r.k).unwrap_or(0);
    let mut s = format!("fixer\tpass@1\tdebug_rate@{k}\tpass@{k}\tstagnation%\tdominant_signal\n");
    for r in ranked(reports) {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.fixer,
            pct(r.pass_at_1),
            pct(r.debug_rate_at_k),
            pct(r.pass_at_k),
            pct(r.stagnation.overall),
            r.dominant_signal.map(|d| d.as_str()).unwrap_or("-")
        );
    }
    s
}

fn bucket_label(b: Bucket) -> &'static str {
    match b {
        Bucket::CompileError => "compile",
        Bucket::LogicError => "logic",
        Bucket::PerfBroken => "perf-broken",
        Bucket::MemoryCrash => "mem-crash",
        Bucket::Timeout => "timeout",
        _ => b.as_str(),
    }
}

const FIX_RATE_ORDER: [Bucket; 5] = [
    Bucket::CompileError,
    Bucket::LogicError,
    Bucket::PerfBroken,
    Bucket::MemoryCrash,
    Bucket::Timeout,
];

fn render_fix_rate(reports: &BTreeMap<String, MetricReport>, outcomes: &BTreeMap<String, Vec<TaskOutcome>>) -> String {
    debug_assert!(FIX_RATE_ORDER.iter().all(|b| FIX_RATE_BUCKETS.contains(b)));
    let gate = reports.values().next().map(|r| r.fix_rate_gate_p).unwrap_or(0.0);
    let mut s = format!("# fix_rate at p={gate}; n per fixer in parentheses\nfixer");
    for b in FIX_RATE_ORDER {
        let _ = write!(s, "\t{}", bucket_label(b));
    }
    s.push('\n');
    for r in ranked(reports) {
        s.push_str(&r.fixer);
        let outs = outcomes.get(&r.fixer).map(Vec::as_slice).unwrap_or(&[]);
        for b in FIX_RATE_ORDER {
            let n = outs.iter().filter(|o| o.initial_bucket == Some(b)).count();
            let _ = write!(s, "\t{} ({n})", pct(r.fix_rate.get(&b).copied().flatten()));
        }
        s.push('\n');
    }
    s
}

fn render_stagnation(reports: &BTreeMap<String, MetricReport>) -> String {
    let mut s = String::from("fixer\tn_fail\toverall");
    for sig in StopReason::SIGNALS {
        let _ = write!(s, "\t{}", sig.as_str());
    }
    s.push('\n');
    for r in ranked(reports) {
        let _ = write!(s, "{}\t{}\t{}", r.fixer, r.n_fail, pct(r.stagnation.overall));
        for (_, v) in &r.stagnation.per_signal {
            let _ = write!(s, "\t{}", pct(*v));
        }
        s.push('\n');
    }
    s
}

fn render_diagnostics(reports: &BTreeMap<String, MetricReport>) -> String {
    let mut s = String::from(
        "fixer\tn_tasks\tpass@k_symmetric\toscillation_rate\tprogression_rate\tunique_approach_ratio\n",
    );
    for r in ranked(reports) {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.fixer,
            r.n_tasks,
            pct(r.pass_at_k_symmetric),
            pct(r.oscillation_rate),
            pct(r.progression_rate),
            r.unique_approach_ratio.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
        );
    }
    s
}

fn render_transitions(reports: &BTreeMap<String, MetricReport>) -> String {
    let mut s = String::new();
    for (fixer, r) in reports {
        let _ = writeln!(s, "# {fixer}: row = category at t-1, column = category at t");
        s.push_str("from\\to");
        for c in Category::ALL {
            let _ = write!(s, "\t{}", c.as_str());
        }
        s.push_str("\tsupport\n");
        for from in Category::ALL {
            s.push_str(from.as_str());
            for to in Category::ALL {
                let _ = write!(s, "\t{:.3}", r.transition.entries[from.index()][to.index()]);
            }
            let _ = writeln!(s, "\t{}", r.transition.row_support(from));
        }
        s.push('\n');
    }
    s
}

/// pass@k per gate threshold, re-gated from the stored outcomes. Thresholds
/// above the run's own gate are marked `*`: trajectories stopped on a pass
/// that would now fail were never continued.
fn render_gate_sweep(outcomes: &BTreeMap<String, Vec<TaskOutcome>>, k: usize, run_p: f64) -> String {
    let mut s = String::from("fixer");
    for p in GATE_SWEEP {
        let _ = write!(s, "\tp={p}{}", if p > run_p { "*" } else { "" });
    }
    s.push_str("\tswing_pp\n");
    for (fixer, outs) in outcomes {
        s.push_str(fixer);
        let mut scores = Vec::new();
        for p in GATE_SWEEP {
            let gated: Vec<TaskOutcome> = outs.iter().map(|o| o.regate(p)).collect();
            let v = metrics::pass_at_k_asymmetric(&gated, k);
            if let Some(x) = v {
                scores.push(x * 100.0);
            }
            let _ = write!(s, "\t{}", pct(v));
        }
        let _ = writeln!(
            s,
            "\t{}",
            robustness::swing(&scores).map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())
        );
    }
    if GATE_SWEEP.iter().any(|p| *p > run_p) {
        let _ = writeln!(s, "# * stricter than the stored run's p={run_p}: lower bound");
    }
    s
}

fn render_tiers(outcomes: &BTreeMap<String, Vec<TaskOutcome>>, panel: &[String], k: usize, gate: f64) -> Result<String> {
    let all: Vec<TaskOutcome> = outcomes.values().flatten().map(|o| o.regate(gate)).collect();
    let induction = corpus::induce_tiers(&all, panel)?;
    let gated: BTreeMap<String, Vec<TaskOutcome>> = outcomes
        .iter()
        .map(|(f, v)| (f.clone(), v.iter().map(|o| o.regate(gate)).collect()))
        .collect();
    let per = robustness::tier_pass_at_k(&gated, &induction, k);
    let mut s = format!("# panel: {}\nfixer", panel.join(", "));
    for t in Tier::ALL {
        let n = induction.tiers.values().filter(|d| d.tier == t).count();
        let _ = write!(s, "\t{} ({n})", t.as_str());
    }
    s.push('\n');
    for (fixer, tiers) in &per {
        s.push_str(fixer);
        for t in Tier::ALL {
            let _ = write!(s, "\t{}", pct(tiers.get(&t).copied().flatten()));
        }
        s.push('\n');
    }
    if !induction.excluded.is_empty() {
        let _ = writeln!(s, "# excluded (incomplete panel coverage): {}", induction.excluded.join(", "));
    }
    Ok(s)
}

/// Axis table: one row per fixer, one column per setting, then the swing.
pub fn render_axis_table(grid: &SweepGrid) -> String {
    let mut s = format!("# {} {}\nfixer", grid.axis, grid.axis.description());
    for c in &grid.cells {
        let mark = if c.setting.is_default(&grid.defaults) { " (default)" } else { "" };
        let _ = write!(s, "\t{}{mark}{}", c.label, if c.exact { "" } else { "*" });
    }
    s.push_str("\tswing_pp\n");
    for f in grid.fixers() {
        s.push_str(&f);
        let best = grid.scores(&f).into_iter().map(|(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
        for c in &grid.cells {
            let v = c.reports.get(&f).and_then(|r| r.pass_at_k);
            let bold = if v == Some(best) { "+" } else { "" };
            let _ = write!(s, "\t{}{bold}", pct(v));
        }
        let pp: Vec<f64> = grid.scores(&f).into_iter().map(|(_, v)| v * 100.0).collect();
        let _ = writeln!(
            s,
            "\t{}",
            robustness::swing(&pp).map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())
        );
    }
    s.push_str("# + best per fixer\n");
    if grid.cells.iter().any(|c| !c.exact) {
        s.push_str("# * lower bound: gate stricter than the stored run\n");
    }
    for c in &grid.cells {
        for (f, e) in &c.errors {
            let _ = writeln!(s, "# error {} {f}: {e}", c.label);
        }
    }
    s
}

/// Rank rows under the default and each compared setting, then τ.
pub fn render_ranking(card: &EvaluationCard) -> String {
    if card.taus.is_empty() {
        return String::new();
    }
    let n = card.taus.iter().map(|t| t.ranking.len()).max().unwrap_or(0);
    let mut s = String::from("rank\tdefault");
    for t in &card.taus {
        let _ = write!(s, "\t{} {}", t.axis, t.compared);
    }
    s.push('\n');
    let default = &card.taus[0].default_ranking;
    for i in 0..n {
        let _ = write!(s, "{}\t{}", i + 1, default.get(i).map(String::as_str).unwrap_or("-"));
        for t in &card.taus {
            let f = t.ranking.get(i).map(String::as_str).unwrap_or("-");
            let flip = t.default_ranking.get(i).map(String::as_str) != Some(f);
            let _ = write!(s, "\t{f}{}", if flip { "+" } else { "" });
        }
        s.push('\n');
    }
    s.push_str("tau\t1.00");
    for t in &card.taus {
        let _ = write!(s, "\t{}", t.tau.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into()));
    }
    s.push_str("\n# + rank differs from default\n");
    s
}

/// Tables plus the evaluation card for a run and any stored sweeps.
pub fn build_report(run: &LoadedRun, sweeps: &[SweepGrid]) -> Result<BTreeMap<String, String>> {
    let analysis = analyze(run, &AnalysisOptions::default())?;
    let mut files = analysis.files.clone();
    files.remove("reports.json");
    for g in sweeps {
        files.insert(format!("axis_{}.tsv", g.axis), render_axis_table(g));
    }
    let card = robustness::emit_evaluation_card(
        &run.config.protocol,
        &analysis.reports,
        sweeps,
        &run.config.corpus_id(),
        &run.config.corpus_hash,
        &run.source_fixers(),
    )?;
    let ranking = render_ranking(&card);
    if !ranking.is_empty() {
        files.insert("ranking.tsv".into(), ranking);
    }
    files.insert("card.txt".into(), card.render_text());
    files.insert("card.json".into(), to_json(&card));
    Ok(files)
}

#[derive(Debug, Clone)]
pub struct RunRequest {
    pub corpus_root: PathBuf,
    pub fixers: Vec<FixerConfig>,
    pub protocol: ProtocolConfig,
    pub backend: BackendHandle,
    pub results_root: PathBuf,
    pub concurrency: usize,
    pub schedule: Schedule,
    pub run_id: Option<String>,
    pub command: String,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: ResultDir,
    pub calls: BTreeMap<String, CallCountReport>,
}

fn load_tasks(root: &Path) -> Result<Vec<Task>> {
    let report = corpus::load_corpus(root)?;
    if let Some(e) = report.errors.first() {
        return Err(Error::Config(format!(
            "{} corpus entries failed to load; first: {e}",
            report.errors.len()
        )));
    }
    if report.tasks.is_empty() {
        return Err(Error::Config(format!("no tasks under {}", root.display())));
    }
    Ok(report.tasks)
}

fn check_panel(fixers: &[FixerConfig]) -> Result<()> {
    if fixers.is_empty() {
        return Err(Error::PanelRequired);
    }
    Ok(())
}

/// Default-protocol evaluation of every fixer, persisted to a new result
/// directory. Configuration problems surface before any fixer call.
pub fn execute_run(req: &RunRequest) -> Result<RunSummary> {
    check_panel(&req.fixers)?;
    req.protocol.validate()?;
    req.backend.validate()?;
    let tasks = load_tasks(&req.corpus_root)?;
    let built = req.fixers.iter().map(FixerConfig::build).collect::<Result<Vec<_>>>()?;
    let env = LoopEnv::new(req.backend.clone()).with_concurrency(req.concurrency);
    env.renderer.check_level(req.protocol.feedback_level)?;

    let dir = ResultDir::create(&req.results_root, req.run_id.as_deref())?;
    let classifier = Classifier::builtin();
    dir.write_config(&RunConfig {
        run_id: dir.run_id.clone(),
        created_at: Utc::now().to_rfc3339(),
        command: req.command.clone(),
        corpus_root: req.corpus_root.clone(),
        corpus_hash: corpus::corpus_fingerprint(&tasks),
        protocol: req.protocol.clone(),
        backend: req.backend.clone(),
        fixers: req.fixers.clone(),
        schedule: req.schedule,
        concurrency: req.concurrency,
        classifier_version: classifier.version().to_string(),
        prompt_assembly: PROMPT_ASSEMBLY_VERSION.to_string(),
    })?;
    dir.write_tasks(&tasks)?;

    let env = env.with_recorder(dir.recorder());
    let mut calls = BTreeMap::new();
    for f in &built {
        let report = match req.schedule {
            Schedule::TwoPhase => debug_loop::run_phase_schedule(&req.protocol, f.as_ref(), &tasks, &env)?.1,
            Schedule::Naive => {
                let trajs = debug_loop::run_naive(&req.protocol, f.as_ref(), &tasks, &env)?;
                let failures = trajs.iter().filter(|t| t.passed_at() != Some(1)).count();
                CallCountReport {
                    n_tasks: tasks.len(),
                    phase1_failures: failures,
                    budget: tasks.len() + (req.protocol.k_budget - 1) * failures,
                    actual: trajs.iter().map(|t| t.records.len()).sum(),
                }
            }
        };
        calls.insert(f.name().to_string(), report);
    }
    let names: Vec<String> = req.fixers.iter().map(|f| f.name.clone()).collect();
    dir.finalize(&names, &tasks)?;
    crate::write_file(&dir.path.join(CALLS_FILE), to_json(&calls))?;
    Ok(RunSummary { dir, calls })
}

#[derive(Debug, Clone)]
pub struct SweepRequest {
    pub run: RunRequest,
    pub axis: Axis,
    pub with_l4: bool,
    /// For A1: re-gate this stored run instead of executing loops.
    pub from_run: Option<PathBuf>,
}

/// Runs an OAT plan and stores the grid as `sweep.json` in a new result
/// directory.
pub fn execute_sweep(req: &SweepRequest) -> Result<(ResultDir, SweepGrid)> {
    let plan = AxisSweepPlan::standard(req.axis, req.run.protocol.clone(), req.with_l4);
    plan.validate()?;
    let grid = match (&req.from_run, req.axis) {
        (Some(from), Axis::A1) => {
            let run = load_run(from)?;
            let plan = AxisSweepPlan::standard(Axis::A1, run.config.protocol.clone(), false);
            let cells = robustness::regate_cells(&plan, &run.outcomes(), run.config.protocol.perf_gate_p);
            SweepGrid {
                axis: Axis::A1,
                defaults: run.config.protocol.clone(),
                cells,
            }
        }
        (Some(_), _) => {
            return Err(Error::Config("--from-run applies to axis A1 only".into()));
        }
        (None, _) => {
            check_panel(&req.run.fixers)?;
            req.run.backend.validate()?;
            let tasks = load_tasks(&req.run.corpus_root)?;
            let built = req.run.fixers.iter().map(FixerConfig::build).collect::<Result<Vec<_>>>()?;
            let panel: Vec<&dyn crate::fixer::Fixer> = built.iter().map(|b| b.as_ref()).collect();
            let env = LoopEnv::new(req.run.backend.clone()).with_concurrency(req.run.concurrency);
            robustness::run_oat_sweep(&plan, &panel, &tasks, &env, None)?
        }
    };
    let dir = ResultDir::create(&req.run.results_root, req.run.run_id.as_deref())?;
    crate::write_file(&dir.path.join(SWEEP_FILE), to_json(&grid))?;
    Ok((dir, grid))
}

pub fn load_sweep(path: &Path) -> Result<SweepGrid> {
    let file = if path.is_dir() { path.join(SWEEP_FILE) } else { path.to_path_buf() };
    read_json(&file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_parts_are_flat() {
        assert_eq!(path_part("DESK/01"), "DESK_01");
        assert_eq!(path_part("gpt-5.4"), "gpt-5.4");
    }

    #[test]
    fn result_dirs_are_disjoint() {
        let root = tempfile::tempdir().unwrap();
        let a = ResultDir::create(root.path(), None).unwrap();
        let b = ResultDir::create(root.path(), None).unwrap();
        assert_ne!(a.path, b.path);
        assert!(a.path.file_name().unwrap().to_string_lossy().ends_with(&a.run_id));
    }

    #[test]
    fn unwritable_root_fails() {
        let root = tempfile::tempdir().unwrap();
        let file = root.path().join("f");
        fs::write(&file, "x").unwrap();
        assert!(ResultDir::create(&file.join("sub"), None).is_err());
    }
}
