//! Metrics over stored trajectories.
//!
//! Rates are computed from exact counts and rounded only when rendered.
//! Undefined rates (empty denominators) are `None`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::classifier::{Bucket, Category, FIXER_UNAVAILABLE_SIGNATURE};
use crate::corpus::TaskSpec;
use crate::debug_loop::{apply_perf_gate, StopReason, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStep {
    pub category: Category,
    pub signature: String,
    pub hash: String,
    pub passed_correctness: bool,
    pub speedup: Option<f64>,
}

impl OutcomeStep {
    fn has_candidate(&self) -> bool {
        self.signature != FIXER_UNAVAILABLE_SIGNATURE
    }
}

/// Per-(fixer, task) summary that metrics are computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub fixer_name: String,
    /// First iteration passing the full gate.
    pub passed_at: Option<usize>,
    pub initial_bucket: Option<Bucket>,
    pub stop_reason: StopReason,
    /// The fixer also produced this task's broken start.
    pub self_source: bool,
    pub steps: Vec<OutcomeStep>,
}

impl TaskOutcome {
    /// `initial_bucket` comes from the manifest's curation bucket, or from the
    /// first iteration when the manifest has none.
    pub fn from_trajectory(traj: &Trajectory, spec: Option<&TaskSpec>) -> TaskOutcome {
        let steps: Vec<OutcomeStep> = traj
            .records
            .iter()
            .map(|r| OutcomeStep {
                category: r.category,
                signature: r.primary_signature.clone(),
                hash: r.candidate_hash.clone(),
                passed_correctness: r.passed_correctness,
                speedup: r.speedup,
            })
            .collect();
        let initial_bucket = spec
            .and_then(|s| s.bucket)
            .or_else(|| traj.records.first().map(|r| r.bucket));
        TaskOutcome {
            task_id: traj.task_id.clone(),
            fixer_name: traj.fixer_name.clone(),
            passed_at: traj.passed_at(),
            initial_bucket,
            stop_reason: traj.stop_reason,
            self_source: spec.is_some_and(|s| s.source_model == traj.fixer_name),
            steps,
        }
    }

    /// Re-applies the gate at `p` to the stored steps. Exact for any `p` not
    /// above the gate the trajectory was run with; above it, iterations the
    /// run never made are missing and the result is a lower bound.
    pub fn regate(&self, p: f64) -> TaskOutcome {
        let pass = self
            .steps
            .iter()
            .position(|s| s.passed_correctness && apply_perf_gate(s.speedup, p));
        let mut out = self.clone();
        match pass {
            Some(i) => {
                out.steps.truncate(i + 1);
                out.passed_at = Some(i + 1);
                out.stop_reason = StopReason::Passed;
            }
            None => {
                out.passed_at = None;
                if self.stop_reason == StopReason::Passed {
                    out.stop_reason = StopReason::MaxIterations;
                }
            }
        }
        out
    }

    /// Minimal outcome with a given first pass, for tests and tier induction.
    pub fn synthetic(task_id: &str, fixer: &str, passed_at: Option<usize>) -> TaskOutcome {
        let len = passed_at.unwrap_or(1);
        let steps = (1..=len)
            .map(|i| {
                let pass = Some(i) == passed_at;
                OutcomeStep {
                    category: if pass { Category::Passed } else { Category::Buildability },
                    signature: if pass { String::new() } else { "syntax_error".into() },
                    hash: format!("{task_id}-{fixer}-{i}"),
                    passed_correctness: pass,
                    speedup: pass.then_some(1.0),
                }
            })
            .collect();
        TaskOutcome {
            task_id: task_id.to_string(),
            fixer_name: fixer.to_string(),
            passed_at,
            initial_bucket: None,
            stop_reason: if passed_at.is_some() {
                StopReason::Passed
            } else {
                StopReason::MaxIterations
            },
            self_source: false,
            steps,
        }
    }

    fn effective_k(&self, k: usize, asymmetric: bool) -> usize {
        if asymmetric && self.self_source {
            k.saturating_sub(1)
        } else {
            k
        }
    }

    fn passes_within(&self, k: usize) -> bool {
        self.passed_at.is_some_and(|j| j <= k)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn pass_at_1(outcomes: &[TaskOutcome]) -> Option<f64> {
    ratio(outcomes.iter().filter(|o| o.passes_within(1)).count(), outcomes.len())
}

pub fn pass_at_k(outcomes: &[TaskOutcome], k: usize) -> Option<f64> {
    ratio(outcomes.iter().filter(|o| o.passes_within(k)).count(), outcomes.len())
}

/// Self-source tasks only count passes within the first `k - 1` iterations.
pub fn pass_at_k_asymmetric(outcomes: &[TaskOutcome], k: usize) -> Option<f64> {
    ratio(
        outcomes
            .iter()
            .filter(|o| o.passes_within(o.effective_k(k, true)))
            .count(),
        outcomes.len(),
    )
}

/// Among tasks failing iteration 1, the fraction passing within `k`
/// (within `k - 1` for self-source tasks when `asymmetric`).
pub fn debug_rate_at_k(outcomes: &[TaskOutcome], k: usize, asymmetric: bool) -> Option<f64> {
    let failed_first: Vec<&TaskOutcome> = outcomes.iter().filter(|o| !o.passes_within(1)).collect();
    ratio(
        failed_first
            .iter()
            .filter(|o| o.passes_within(o.effective_k(k, asymmetric)))
            .count(),
        failed_first.len(),
    )
}

pub fn fix_rate_by_bucket(outcomes: &[TaskOutcome], bucket: Bucket) -> Option<f64> {
    let group: Vec<&TaskOutcome> = outcomes
        .iter()
        .filter(|o| o.initial_bucket == Some(bucket))
        .collect();
    ratio(group.iter().filter(|o| o.passed_at.is_some()).count(), group.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagnationBreakdown {
    pub n_fail: usize,
    pub overall: Option<f64>,
    /// One entry per signal, in precedence order.
    pub per_signal: Vec<(StopReason, Option<f64>)>,
    /// Most frequent signal; ties go to the earlier signal. `None` when no
    /// signal fired.
    pub dominant: Option<StopReason>,
}

/// Rates over failing tasks only.
pub fn stagnation_rates(outcomes: &[TaskOutcome]) -> StagnationBreakdown {
    let failing: Vec<&TaskOutcome> = outcomes.iter().filter(|o| o.passed_at.is_none()).collect();
    let n_fail = failing.len();
    let counts: Vec<(StopReason, usize)> = StopReason::SIGNALS
        .iter()
        .map(|s| (*s, failing.iter().filter(|o| o.stop_reason == *s).count()))
        .collect();
    let total: usize = counts.iter().map(|(_, c)| c).sum();
    let mut dominant: Option<(StopReason, usize)> = None;
    for &(s, c) in &counts {
        if c > 0 && dominant.is_none_or(|(_, best)| c > best) {
            dominant = Some((s, c));
        }
    }
    StagnationBreakdown {
        n_fail,
        overall: ratio(total, n_fail),
        per_signal: counts.iter().map(|&(s, c)| (s, ratio(c, n_fail))).collect(),
        dominant: if n_fail > 0 { dominant.map(|(s, _)| s) } else { None },
    }
}

pub fn oscillation_rate(outcomes: &[TaskOutcome]) -> Option<f64> {
    let failing = outcomes.iter().filter(|o| o.passed_at.is_none());
    let n_fail = failing.clone().count();
    ratio(
        failing
            .filter(|o| o.stop_reason == StopReason::CategoryOscillation)
            .count(),
        n_fail,
    )
}

/// Failing tasks with at least one step up the severity ladder.
pub fn progression_rate(outcomes: &[TaskOutcome]) -> Option<f64> {
    let failing: Vec<&TaskOutcome> = outcomes.iter().filter(|o| o.passed_at.is_none()).collect();
    let forward = failing
        .iter()
        .filter(|o| {
            o.steps
                .windows(2)
                .any(|w| w[1].category.severity() > w[0].category.severity())
        })
        .count();
    ratio(forward, failing.len())
}

/// Distinct candidate hashes over iterations that produced a candidate.
pub fn unique_approach_ratio(outcomes: &[TaskOutcome]) -> Option<f64> {
    let steps: Vec<&OutcomeStep> = outcomes
        .iter()
        .flat_map(|o| o.steps.iter())
        .filter(|s| s.has_candidate())
        .collect();
    let distinct: BTreeSet<&str> = steps.iter().map(|s| s.hash.as_str()).collect();
    ratio(distinct.len(), steps.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    /// Row-stochastic; indexed by `Category::index`.
    pub entries: [[f64; 8]; 8],
    pub support_counts: [[usize; 8]; 8],
}

impl TransitionMatrix {
    pub fn row_support(&self, from: Category) -> usize {
        self.support_counts[from.index()].iter().sum()
    }
}

pub fn transition_matrix(outcomes: &[TaskOutcome]) -> TransitionMatrix {
    let mut counts = [[0usize; 8]; 8];
    for o in outcomes {
        for w in o.steps.windows(2) {
            counts[w[0].category.index()][w[1].category.index()] += 1;
        }
    }
    let mut entries = [[0.0; 8]; 8];
    for (a, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total > 0 {
            for (b, &c) in row.iter().enumerate() {
                entries[a][b] = c as f64 / total as f64;
            }
        }
    }
    TransitionMatrix {
        entries,
        support_counts: counts,
    }
}

/// Buckets reported in the fix-rate table.
pub const FIX_RATE_BUCKETS: [Bucket; 5] = [
    Bucket::CompileError,
    Bucket::MemoryCrash,
    Bucket::Timeout,
    Bucket::LogicError,
    Bucket::PerfBroken,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fixer: String,
    pub n_tasks: usize,
    pub k: usize,
    pub gate_p: f64,
    pub pass_at_1: Option<f64>,
    /// Headline score, with the self-source rule applied.
    pub pass_at_k: Option<f64>,
    pub pass_at_k_symmetric: Option<f64>,
    /// Consistent with `pass_at_k`: uses the same per-task budgets.
    pub debug_rate_at_k: Option<f64>,
    pub fix_rate_gate_p: f64,
    pub fix_rate: BTreeMap<Bucket, Option<f64>>,
    pub stagnation: StagnationBreakdown,
    pub oscillation_rate: Option<f64>,
    pub progression_rate: Option<f64>,
    pub unique_approach_ratio: Option<f64>,
    pub n_fail: usize,
    pub dominant_signal: Option<StopReason>,
    pub transition: TransitionMatrix,
}

/// Full report for one fixer. `outcomes` must already be gated at `gate_p`;
/// fix rates are re-gated at `fix_rate_gate_p`.
pub fn compute_report(
    fixer: &str,
    outcomes: &[TaskOutcome],
    k: usize,
    gate_p: f64,
    fix_rate_gate_p: f64,
) -> MetricReport {
    let regated: Vec<TaskOutcome> = outcomes.iter().map(|o| o.regate(fix_rate_gate_p)).collect();
    let stagnation = stagnation_rates(outcomes);
    MetricReport {
        fixer: fixer.to_string(),
        n_tasks: outcomes.len(),
        k,
        gate_p,
        pass_at_1: pass_at_1(outcomes),
        pass_at_k: pass_at_k_asymmetric(outcomes, k),
        pass_at_k_symmetric: pass_at_k(outcomes, k),
        debug_rate_at_k: debug_rate_at_k(outcomes, k, true),
        fix_rate_gate_p,
        fix_rate: FIX_RATE_BUCKETS
            .iter()
            .map(|b| (*b, fix_rate_by_bucket(&regated, *b)))
            .collect(),
        n_fail: stagnation.n_fail,
        dominant_signal: stagnation.dominant,
        stagnation,
        oscillation_rate: oscillation_rate(outcomes),
        progression_rate: progression_rate(outcomes),
        unique_approach_ratio: unique_approach_ratio(outcomes),
        transition: transition_matrix(outcomes),
    }
}

/// Percentage with one decimal, or `-` when undefined.
pub fn pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.1}", x * 100.0),
        None => "-".to_string(),
    }
}
