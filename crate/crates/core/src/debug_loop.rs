//! The per-(fixer, task) debug loop, stagnation detection, the performance
//! gate and the two-phase schedule.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{self, BackendHandle, ExecutionOutcome};
use crate::classifier::{
    collapse_to_bucket, Bucket, Category, Classifier, ClassifierVerdict, FIXER_UNAVAILABLE_SIGNATURE,
};
use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::feedback::{FeedbackLevel, FeedbackRenderer, GateContext};
use crate::fixer::{self, Fixer, HistoryPair, PromptBundle, RequestContext};
use crate::timing;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Iterative,
    Repeated,
}

impl Sampling {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampling::Iterative => "iterative",
            Sampling::Repeated => "repeated",
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(Sampling::Iterative),
            "repeated" => Ok(Sampling::Repeated),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

/// Oscillation fires on at least `oscillation_min` category changes within
/// the last `oscillation_window` records; no_progress on `no_progress_run`
/// consecutive identical (category, signature) records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagnationThresholds {
    pub oscillation_min: usize,
    pub oscillation_window: usize,
    pub no_progress_run: usize,
}

impl StagnationThresholds {
    pub const DEFAULT: StagnationThresholds = StagnationThresholds {
        oscillation_min: 3,
        oscillation_window: 5,
        no_progress_run: 3,
    };
    pub const OSC_TIGHT: (usize, usize) = (2, 4);
    pub const OSC_LOOSE: (usize, usize) = (4, 6);

    pub fn with_oscillation(self, (min, window): (usize, usize)) -> Self {
        StagnationThresholds {
            oscillation_min: min,
            oscillation_window: window,
            ..self
        }
    }

    pub fn with_no_progress(self, run: usize) -> Self {
        StagnationThresholds {
            no_progress_run: run,
            ..self
        }
    }
}

impl Default for StagnationThresholds {
    fn default() -> Self {
        StagnationThresholds::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub k_budget: usize,
    pub history_depth: usize,
    pub feedback_level: FeedbackLevel,
    pub sampling: Sampling,
    pub perf_gate_p: f64,
    pub temperature: f64,
    #[serde(default)]
    pub stagnation: StagnationThresholds,
    #[serde(default = "default_launches")]
    pub timing_launches: usize,
}

fn default_launches() -> usize {
    timing::DEFAULT_LAUNCHES
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            k_budget: 5,
            history_depth: 4,
            feedback_level: FeedbackLevel::L3,
            sampling: Sampling::Iterative,
            perf_gate_p: 0.7,
            temperature: fixer::DEFAULT_TEMPERATURE,
            stagnation: StagnationThresholds::DEFAULT,
            timing_launches: timing::DEFAULT_LAUNCHES,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k_budget == 0 {
            return bad("k_budget must be at least 1");
        }
        if self.history_depth == 0 {
            return bad("history_depth must be at least 1");
        }
        if !(self.perf_gate_p >= 0.0 && self.perf_gate_p.is_finite()) {
            return bad("perf_gate_p must be a finite value >= 0");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        let s = self.stagnation;
        if s.oscillation_min == 0 || s.oscillation_window < 2 || s.no_progress_run < 2 {
            return bad("stagnation thresholds out of range");
        }
        if self.timing_launches == 0 {
            return bad("timing_launches must be at least 1");
        }
        Ok(())
    }

    /// Switches sampling mode along with its temperature.
    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self.temperature = match sampling {
            Sampling::Iterative => fixer::DEFAULT_TEMPERATURE,
            Sampling::Repeated => fixer::REPEATED_TEMPERATURE,
        };
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Passed,
    DuplicateCode,
    CodeCycle,
    CategoryOscillation,
    NoProgress,
    MaxIterations,
    FixerUnavailable,
}

impl StopReason {
    /// In precedence order.
    pub const SIGNALS: [StopReason; 4] = [
        StopReason::DuplicateCode,
        StopReason::CodeCycle,
        StopReason::CategoryOscillation,
        StopReason::NoProgress,
    ];

    pub const ALL: [StopReason; 7] = [
        StopReason::Passed,
        StopReason::DuplicateCode,
        StopReason::CodeCycle,
        StopReason::CategoryOscillation,
        StopReason::NoProgress,
        StopReason::MaxIterations,
        StopReason::FixerUnavailable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Passed => "passed",
            StopReason::DuplicateCode => "duplicate_code",
            StopReason::CodeCycle => "code_cycle",
            StopReason::CategoryOscillation => "category_oscillation",
            StopReason::NoProgress => "no_progress",
            StopReason::MaxIterations => "max_iterations",
            StopReason::FixerUnavailable => "fixer_unavailable",
        }
    }

    pub fn is_stagnation(self) -> bool {
        StopReason::SIGNALS.contains(&self)
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StopReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StopReason::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown stop reason `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    /// Empty when the fixer produced no response.
    pub candidate_hash: String,
    pub category: Category,
    pub bucket: Bucket,
    pub primary_signature: String,
    pub unclassified: bool,
    pub passed_correctness: bool,
    pub speedup: Option<f64>,
    pub cv: Option<f64>,
    pub cv_flagged: bool,
    pub timing_fallback: bool,
    pub gate_passed: Option<bool>,
    pub feedback_level: FeedbackLevel,
    pub wall_time_ms: f64,
}

impl IterationRecord {
    pub fn passes(&self) -> bool {
        self.gate_passed == Some(true)
    }

    pub fn fixer_unavailable(&self) -> bool {
        self.primary_signature == FIXER_UNAVAILABLE_SIGNATURE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub fixer_name: String,
    pub records: Vec<IterationRecord>,
    pub stop_reason: StopReason,
}

impl Trajectory {
    pub fn passed_at(&self) -> Option<usize> {
        self.records.iter().find(|r| r.passes()).map(|r| r.index)
    }
}

/// Fields stagnation detection reads from a record.
pub trait StagnationView {
    fn hash(&self) -> &str;
    fn category(&self) -> Category;
    fn signature(&self) -> &str;

    /// Records without a candidate take no part in hash or streak signals.
    fn no_candidate(&self) -> bool {
        self.signature() == FIXER_UNAVAILABLE_SIGNATURE
    }
}

impl StagnationView for IterationRecord {
    fn hash(&self) -> &str {
        &self.candidate_hash
    }
    fn category(&self) -> Category {
        self.category
    }
    fn signature(&self) -> &str {
        &self.primary_signature
    }
}

/// Checks the signals after the last record, in precedence order.
pub fn detect_stagnation<R: StagnationView>(records: &[R], th: &StagnationThresholds) -> Option<StopReason> {
    let n = records.len();
    if n < 2 {
        return None;
    }
    let cur = &records[n - 1];
    let prev = &records[n - 2];

    if !cur.no_candidate() {
        if !prev.no_candidate() && cur.hash() == prev.hash() {
            return Some(StopReason::DuplicateCode);
        }
        if records[..n - 2]
            .iter()
            .any(|r| !r.no_candidate() && r.hash() == cur.hash())
        {
            return Some(StopReason::CodeCycle);
        }
    }

    // 1-based t runs over max(2, n-w+1)..=n; 0-based pairs (t-2, t-1).
    let start_t = std::cmp::max(2, (n + 1).saturating_sub(th.oscillation_window));
    let transitions = (start_t..=n)
        .filter(|&t| records[t - 1].category() != records[t - 2].category())
        .count();
    if transitions >= th.oscillation_min {
        return Some(StopReason::CategoryOscillation);
    }

    let c = th.no_progress_run;
    if n >= c {
        let tail = &records[n - c..];
        let key = (tail[0].category(), tail[0].signature());
        if tail
            .iter()
            .all(|r| !r.no_candidate() && (r.category(), r.signature()) == key)
        {
            return Some(StopReason::NoProgress);
        }
    }
    None
}

/// Correctness passes need `speedup >= p`; at `p == 0` the gate is vacuous.
pub fn apply_perf_gate(speedup: Option<f64>, p: f64) -> bool {
    if p <= 0.0 {
        return true;
    }
    matches!(speedup, Some(s) if s >= p)
}

/// Sink for run artifacts. Implementations must be safe to share across
/// concurrently running loops.
pub trait RunRecorder: Send + Sync {
    fn response(&self, fixer: &str, task: &Task, iteration: usize, raw: &str) -> Result<()>;
    fn solution(&self, hash: &str, text: &str) -> Result<()>;
    fn outcomes(&self, fixer: &str, task: &Task, iteration: usize, outcomes: &[ExecutionOutcome]) -> Result<()>;
    fn record(&self, fixer: &str, task: &Task, record: &IterationRecord, stop: Option<StopReason>) -> Result<()>;
}

#[derive(Debug, Default)]
pub struct NullRecorder;

impl RunRecorder for NullRecorder {
    fn response(&self, _: &str, _: &Task, _: usize, _: &str) -> Result<()> {
        Ok(())
    }
    fn solution(&self, _: &str, _: &str) -> Result<()> {
        Ok(())
    }
    fn outcomes(&self, _: &str, _: &Task, _: usize, _: &[ExecutionOutcome]) -> Result<()> {
        Ok(())
    }
    fn record(&self, _: &str, _: &Task, _: &IterationRecord, _: Option<StopReason>) -> Result<()> {
        Ok(())
    }
}

/// Everything a loop needs besides the task and fixer.
#[derive(Clone)]
pub struct LoopEnv {
    pub backend: BackendHandle,
    pub classifier: Arc<Classifier>,
    pub renderer: Arc<FeedbackRenderer>,
    pub recorder: Arc<dyn RunRecorder>,
    /// Upper bound on concurrently running loops.
    pub concurrency: usize,
}

impl LoopEnv {
    pub fn new(backend: BackendHandle) -> LoopEnv {
        let classifier = Arc::new(Classifier::builtin());
        LoopEnv {
            backend,
            renderer: Arc::new(FeedbackRenderer::builtin(classifier.clone())),
            classifier,
            recorder: Arc::new(NullRecorder),
            concurrency: 4,
        }
    }

    pub fn with_recorder(mut self, recorder: Arc<dyn RunRecorder>) -> LoopEnv {
        self.recorder = recorder;
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> LoopEnv {
        self.concurrency = n.max(1);
        self
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.concurrency.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

/// One (fixer, task) loop, advanced one iteration at a time.
pub struct TaskLoop<'a> {
    cfg: &'a ProtocolConfig,
    task: &'a Task,
    fixer: &'a dyn Fixer,
    env: &'a LoopEnv,
    records: Vec<IterationRecord>,
    history: Vec<HistoryPair>,
    stop: Option<StopReason>,
    calls: usize,
}

impl<'a> TaskLoop<'a> {
    pub fn new(cfg: &'a ProtocolConfig, fixer: &'a dyn Fixer, task: &'a Task, env: &'a LoopEnv) -> Self {
        TaskLoop {
            cfg,
            task,
            fixer,
            env,
            records: Vec::new(),
            history: Vec::new(),
            stop: None,
            calls: 0,
        }
    }

    pub fn stopped(&self) -> Option<StopReason> {
        self.stop
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    /// The bundle the next request would carry.
    pub fn bundle(&self) -> PromptBundle {
        let bs = &self.task.broken_start;
        let history = match self.cfg.sampling {
            Sampling::Repeated => Vec::new(),
            Sampling::Iterative => {
                let skip = self.history.len().saturating_sub(self.cfg.history_depth);
                self.history[skip..].to_vec()
            }
        };
        PromptBundle {
            prompt: bs.prompt.clone(),
            broken_kernel: bs.broken_kernel.clone(),
            error_log: bs.error_log.clone(),
            history,
        }
    }

    /// Runs one iteration. Returns the stop reason once the loop has ended.
    pub fn step(&mut self) -> Result<Option<StopReason>> {
        if self.stop.is_some() {
            return Ok(self.stop);
        }
        let index = self.records.len() + 1;
        let fixer_name = self.fixer.name().to_string();
        let task = self.task;
        let env = self.env;
        let ctx = RequestContext {
            task_id: task.spec.task_id.clone(),
            stem: task.stem.clone(),
            iteration: index,
        };
        let bundle = self.bundle();
        self.calls += 1;

        let raw = match self.fixer.request_candidate(&ctx, &bundle, self.cfg.temperature) {
            Ok(raw) => Some(raw),
            Err(Error::FixerUnavailable { message, .. }) => {
                env.recorder
                    .response(&fixer_name, task, index, &format!("<fixer unavailable: {message}>"))?;
                None
            }
            Err(e) => return Err(e),
        };

        let (record, outcomes, candidate) = match raw {
            None => {
                let v = ClassifierVerdict::fixer_unavailable();
                (self.make_record(index, String::new(), &v, 0.0, None), Vec::new(), String::new())
            }
            Some(raw) => {
                env.recorder.response(&fixer_name, task, index, &raw)?;
                let candidate = fixer::extract_code(&raw).unwrap_or_default();
                let hash = crate::content_hash(&candidate);
                env.recorder.solution(&hash, &candidate)?;
                let handle = env.backend.for_task(&task.spec);
                let pre = backend::preflight(task, &candidate);
                let outcomes = if pre.failed() {
                    vec![pre]
                } else {
                    backend::execute_candidate(&handle, task, &candidate)?
                };
                env.recorder.outcomes(&fixer_name, task, index, &outcomes)?;
                let verdict = env.classifier.classify_iteration(&outcomes);
                let wall: f64 = outcomes.iter().map(|o| o.wall_time_ms).sum();
                let measurement = if verdict.category == Category::Passed {
                    timing::speedup_for(&handle, task, &candidate, &outcomes, self.cfg.timing_launches)
                        .ok()
                        .flatten()
                } else {
                    None
                };
                let record = self.make_record(index, hash, &verdict, wall, measurement.as_ref());
                (record, outcomes, candidate)
            }
        };

        self.records.push(record);
        let record = self.records.last().unwrap();
        let stop = if record.passes() {
            Some(StopReason::Passed)
        } else if let Some(signal) = detect_stagnation(&self.records, &self.cfg.stagnation) {
            Some(signal)
        } else if index >= self.cfg.k_budget {
            Some(if record.fixer_unavailable() {
                StopReason::FixerUnavailable
            } else {
                StopReason::MaxIterations
            })
        } else {
            None
        };
        env.recorder.record(&fixer_name, task, record, stop)?;

        if stop.is_none() && !record.fixer_unavailable() && self.cfg.sampling == Sampling::Iterative {
            let verdict = ClassifierVerdict {
                category: record.category,
                bucket: record.bucket,
                primary_signature: record.primary_signature.clone(),
                unclassified: record.unclassified,
                matched_stage: None,
            };
            let message = if record.passed_correctness {
                env.renderer.render_gate_feedback(
                    &verdict,
                    &outcomes,
                    self.cfg.feedback_level,
                    GateContext {
                        speedup: record.speedup,
                        gate_p: self.cfg.perf_gate_p,
                    },
                )?
            } else {
                env.renderer
                    .render_feedback(&verdict, &outcomes, self.cfg.feedback_level)?
            };
            self.history.push(HistoryPair {
                candidate,
                feedback: message.body,
            });
        }
        self.stop = stop;
        Ok(stop)
    }

    fn make_record(
        &self,
        index: usize,
        hash: String,
        verdict: &ClassifierVerdict,
        wall_time_ms: f64,
        measurement: Option<&timing::SpeedupMeasurement>,
    ) -> IterationRecord {
        let passed_correctness = verdict.category == Category::Passed;
        let speedup = measurement.map(|m| m.speedup);
        let gate_passed = passed_correctness.then(|| apply_perf_gate(speedup, self.cfg.perf_gate_p));
        IterationRecord {
            index,
            candidate_hash: hash,
            category: verdict.category,
            bucket: collapse_to_bucket(verdict.category, gate_passed == Some(false)),
            primary_signature: verdict.primary_signature.clone(),
            unclassified: verdict.unclassified,
            passed_correctness,
            speedup,
            cv: measurement.and_then(|m| m.cv),
            cv_flagged: measurement.is_some_and(|m| m.cv_flagged),
            timing_fallback: measurement.is_some_and(|m| m.fallback_single_launch),
            gate_passed,
            feedback_level: self.cfg.feedback_level,
            wall_time_ms,
        }
    }

    pub fn finish(self) -> Trajectory {
        Trajectory {
            task_id: self.task.spec.task_id.clone(),
            fixer_name: self.fixer.name().to_string(),
            records: self.records,
            stop_reason: self.stop.unwrap_or(StopReason::MaxIterations),
        }
    }
}

pub fn run_task_loop(cfg: &ProtocolConfig, fixer: &dyn Fixer, task: &Task, env: &LoopEnv) -> Result<Trajectory> {
    let mut lp = TaskLoop::new(cfg, fixer, task, env);
    while lp.step()?.is_none() {}
    Ok(lp.finish())
}

/// Runs every task to completion, in parallel up to the concurrency cap.
/// Results keep task order.
pub fn run_naive(cfg: &ProtocolConfig, fixer: &dyn Fixer, tasks: &[Task], env: &LoopEnv) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    env.renderer.check_level(cfg.feedback_level)?;
    env.pool()?
        .install(|| tasks.par_iter().map(|t| run_task_loop(cfg, fixer, t, env)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCountReport {
    pub n_tasks: usize,
    pub phase1_failures: usize,
    /// N + (K-1)|F|, the worst case.
    pub budget: usize,
    /// Calls actually made; below `budget` when phase 2 stops early.
    pub actual: usize,
}

/// One iteration on every task, then the remaining budget only on the
/// phase-1 failures. Loop state carries over, so trajectories match the
/// naive schedule.
pub fn run_phase_schedule(
    cfg: &ProtocolConfig,
    fixer: &dyn Fixer,
    tasks: &[Task],
    env: &LoopEnv,
) -> Result<(Vec<Trajectory>, CallCountReport)> {
    cfg.validate()?;
    env.renderer.check_level(cfg.feedback_level)?;
    if tasks.is_empty() {
        return Err(Error::Invalid("corpus is empty".into()));
    }
    let pool = env.pool()?;
    let mut loops: Vec<TaskLoop> = tasks.iter().map(|t| TaskLoop::new(cfg, fixer, t, env)).collect();

    pool.install(|| loops.par_iter_mut().try_for_each(|lp| lp.step().map(|_| ())))?;
    let failures = loops.iter().filter(|lp| lp.stopped().is_none()).count();

    pool.install(|| {
        loops.par_iter_mut().try_for_each(|lp| {
            while lp.step()?.is_none() {}
            Ok::<_, Error>(())
        })
    })?;

    let actual = loops.iter().map(TaskLoop::calls).sum();
    let report = CallCountReport {
        n_tasks: tasks.len(),
        phase1_failures: failures,
        budget: tasks.len() + (cfg.k_budget - 1) * failures,
        actual,
    };
    Ok((loops.into_iter().map(TaskLoop::finish).collect(), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct R(&'static str, Category, &'static str);

    impl StagnationView for R {
        fn hash(&self) -> &str {
            self.0
        }
        fn category(&self) -> Category {
            self.1
        }
        fn signature(&self) -> &str {
            self.2
        }
    }

    const B: Category = Category::Buildability;
    const F: Category = Category::FunctionalCorrectness;
    const TH: StagnationThresholds = StagnationThresholds::DEFAULT;

    #[test]
    fn signals() {
        assert_eq!(detect_stagnation(&[R("a", B, "x")], &TH), None);
        assert_eq!(
            detect_stagnation(&[R("a", B, "x"), R("a", B, "x")], &TH),
            Some(StopReason::DuplicateCode)
        );
        assert_eq!(
            detect_stagnation(&[R("a", B, "x"), R("b", F, "y"), R("a", B, "x")], &TH),
            Some(StopReason::CodeCycle)
        );
        let osc = [R("a", B, "x"), R("b", F, "y"), R("c", B, "x"), R("d", F, "y")];
        assert_eq!(detect_stagnation(&osc, &TH), Some(StopReason::CategoryOscillation));
        let stuck = [R("a", B, "s"), R("b", B, "s"), R("c", B, "s")];
        assert_eq!(detect_stagnation(&stuck, &TH), Some(StopReason::NoProgress));
    }

    #[test]
    fn unavailable_records_break_streaks() {
        let u = FIXER_UNAVAILABLE_SIGNATURE;
        let recs = [R("", B, u), R("", B, u), R("", B, u)];
        assert_eq!(detect_stagnation(&recs, &TH), None);
    }

    #[test]
    fn oscillation_window_is_recent() {
        // Three early changes fall outside a 5-wide window at n=7.
        let recs = [
            R("1", B, "x"),
            R("2", F, "y"),
            R("3", B, "x"),
            R("4", F, "y"),
            R("5", F, "z"),
            R("6", F, "w"),
            R("7", F, "v"),
        ];
        assert_eq!(detect_stagnation(&recs, &TH), None);
    }

    #[test]
    fn gate_truth_table() {
        assert!(apply_perf_gate(Some(1.10), 0.7));
        assert!(!apply_perf_gate(Some(0.69), 0.7));
        assert!(apply_perf_gate(Some(0.7), 0.7));
        assert!(apply_perf_gate(None, 0.0));
        assert!(!apply_perf_gate(None, 0.7));
        assert!(apply_perf_gate(Some(0.01), 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(ProtocolConfig::default().validate().is_ok());
        let c = ProtocolConfig {
            k_budget: 0,
            ..ProtocolConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let r = ProtocolConfig::default().with_sampling(Sampling::Repeated);
        assert_eq!(r.temperature, 1.0);
    }
}
