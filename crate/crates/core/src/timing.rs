//! Post hoc speedup measurement.

use serde::{Deserialize, Serialize};

use crate::backend::{self, BackendHandle, ExecutionOutcome, LaunchReport, Stage};
use crate::corpus::Task;
use crate::error::{Error, Result};

pub const DEFAULT_LAUNCHES: usize = 10;
/// CV above this (strictly) is flagged; flagged cells are still reported.
pub const CV_THRESHOLD: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupMeasurement {
    pub candidate_mean_ms: f64,
    pub reference_mean_ms: f64,
    pub speedup: f64,
    pub launch_means_ms: Vec<f64>,
    pub cv: Option<f64>,
    pub cv_flagged: bool,
    pub fallback_single_launch: bool,
}

/// Population standard deviation over mean.
pub fn compute_cv(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Measurement("no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean <= 0.0 || !mean.is_finite() {
        return Err(Error::Measurement(format!("mean must be positive, got {mean}")));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

pub fn is_flagged(cv: f64) -> bool {
    cv > CV_THRESHOLD
}

/// Builds a measurement from launch means, or from a single harness-run time
/// when `fallback` is set.
pub fn summarize(launch_means_ms: Vec<f64>, reference_mean_ms: f64, fallback: bool) -> Result<SpeedupMeasurement> {
    if reference_mean_ms.is_nan() || reference_mean_ms <= 0.0 {
        return Err(Error::Measurement(format!(
            "reference_mean_ms must be positive, got {reference_mean_ms}"
        )));
    }
    if launch_means_ms.is_empty() {
        return Err(Error::Measurement("no parsable launch timings".into()));
    }
    let candidate_mean_ms = launch_means_ms.iter().sum::<f64>() / launch_means_ms.len() as f64;
    if candidate_mean_ms.is_nan() || candidate_mean_ms <= 0.0 {
        return Err(Error::Measurement(format!(
            "candidate mean must be positive, got {candidate_mean_ms}"
        )));
    }
    let cv = if fallback || launch_means_ms.len() < 2 {
        None
    } else {
        Some(compute_cv(&launch_means_ms)?)
    };
    Ok(SpeedupMeasurement {
        candidate_mean_ms,
        reference_mean_ms,
        speedup: reference_mean_ms / candidate_mean_ms,
        cv_flagged: cv.is_some_and(is_flagged),
        cv,
        launch_means_ms,
        fallback_single_launch: fallback,
    })
}

/// Relaunches the candidate `launches` times and compares against the frozen
/// reference. Falls back to the timing printed by the correctness run when
/// the perf build fails or the device is too old.
pub fn measure_speedup(
    handle: &BackendHandle,
    task: &Task,
    candidate: &str,
    harness_stdout: &str,
    reference_mean_ms: f64,
    launches: usize,
) -> Result<SpeedupMeasurement> {
    let pattern = &task.spec.timing_parser;
    match backend::launch_timings(handle, task, candidate, launches.max(1))? {
        LaunchReport::Launched(outputs) => {
            let mut means = Vec::with_capacity(outputs.len());
            for out in &outputs {
                if let Some(ms) = backend::parse_timing(pattern, out)? {
                    means.push(ms);
                }
            }
            summarize(means, reference_mean_ms, false)
        }
        LaunchReport::PerfBuildFailed(_) | LaunchReport::IncompatibleArch => {
            let single = backend::parse_timing(pattern, harness_stdout)?
                .ok_or_else(|| Error::Measurement("fallback run printed no timing".into()))?;
            summarize(vec![single], reference_mean_ms, true)
        }
    }
}

/// Measurement for a correctness pass, using the task's frozen reference.
/// `Ok(None)` when the task has no reference time.
pub fn speedup_for(
    handle: &BackendHandle,
    task: &Task,
    candidate: &str,
    outcomes: &[ExecutionOutcome],
    launches: usize,
) -> Result<Option<SpeedupMeasurement>> {
    let Some(reference) = task.spec.reference_mean_ms else {
        return Ok(None);
    };
    let harness_stdout = outcomes
        .iter()
        .rev()
        .find(|o| matches!(o.stage, Stage::Test | Stage::Run))
        .map(|o| o.stdout.as_str())
        .unwrap_or("");
    measure_speedup(handle, task, candidate, harness_stdout, reference, launches).map(Some)
}
