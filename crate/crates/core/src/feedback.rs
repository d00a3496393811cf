//! Feedback messages for failed iterations, at richness levels L0 to L4.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::ExecutionOutcome;
use crate::classifier::{Bucket, Category, Classifier, ClassifierVerdict, RuleStage};
use crate::error::{Error, Result};

const BUILTIN_TEMPLATES: &str = include_str!("../assets/feedback_templates.json");

/// Shown for extractor fields the verifier did not print.
pub const UNAVAILABLE: &str = "unavailable";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeedbackLevel {
    L0,
    L1,
    L2,
    L3,
    #[serde(rename = "L3_raw")]
    L3Raw,
    L4,
}

impl FeedbackLevel {
    pub const SWEEP: [FeedbackLevel; 5] = [
        FeedbackLevel::L0,
        FeedbackLevel::L1,
        FeedbackLevel::L2,
        FeedbackLevel::L3,
        FeedbackLevel::L3Raw,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackLevel::L0 => "L0",
            FeedbackLevel::L1 => "L1",
            FeedbackLevel::L2 => "L2",
            FeedbackLevel::L3 => "L3",
            FeedbackLevel::L3Raw => "L3_raw",
            FeedbackLevel::L4 => "L4",
        }
    }
}

impl fmt::Display for FeedbackLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeedbackLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L0" => Ok(FeedbackLevel::L0),
            "L1" => Ok(FeedbackLevel::L1),
            "L2" => Ok(FeedbackLevel::L2),
            "L3" => Ok(FeedbackLevel::L3),
            "L3_raw" | "L3-raw" | "L3raw" => Ok(FeedbackLevel::L3Raw),
            "L4" => Ok(FeedbackLevel::L4),
            other => Err(Error::Config(format!("unknown feedback level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMessage {
    pub body: String,
    pub level: FeedbackLevel,
    pub category: Category,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    pub head_lines: usize,
    pub tail_lines: usize,
    pub char_budget: usize,
    /// Substituted into the timeout template.
    pub test_budget_s: u64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            head_lines: 50,
            tail_lines: 30,
            char_budget: 8000,
            test_budget_s: crate::backend::DEFAULT_TEST_TIMEOUT_S,
        }
    }
}

/// Source of profiler-derived signals for L4.
pub trait ProfilerProvider: Send + Sync {
    fn signals(&self, outcomes: &[ExecutionOutcome]) -> Vec<(String, String)>;
}

/// Provider that reports nothing.
#[derive(Debug, Default)]
pub struct StubProfiler;

impl ProfilerProvider for StubProfiler {
    fn signals(&self, _outcomes: &[ExecutionOutcome]) -> Vec<(String, String)> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: String,
    pub templates: BTreeMap<String, String>,
}

impl TemplateSet {
    pub fn builtin() -> TemplateSet {
        serde_json::from_str(BUILTIN_TEMPLATES).expect("builtin templates are valid")
    }

    pub fn from_json(text: &str) -> Result<TemplateSet> {
        serde_json::from_str(text).map_err(|e| Error::json("feedback templates", e))
    }
}

/// Speedup context for feedback on a correctness pass that missed the gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateContext {
    pub speedup: Option<f64>,
    pub gate_p: f64,
}

pub struct FeedbackRenderer {
    templates: TemplateSet,
    config: FeedbackConfig,
    classifier: Arc<Classifier>,
    provider: Option<Arc<dyn ProfilerProvider>>,
}

impl fmt::Debug for FeedbackRenderer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackRenderer")
            .field("templates", &self.templates.version)
            .field("config", &self.config)
            .field("provider", &self.provider.is_some())
            .finish()
    }
}

impl FeedbackRenderer {
    pub fn new(templates: TemplateSet, config: FeedbackConfig, classifier: Arc<Classifier>) -> Self {
        FeedbackRenderer {
            templates,
            config,
            classifier,
            provider: None,
        }
    }

    pub fn builtin(classifier: Arc<Classifier>) -> Self {
        FeedbackRenderer::new(TemplateSet::builtin(), FeedbackConfig::default(), classifier)
    }

    pub fn with_provider(mut self, provider: Arc<dyn ProfilerProvider>) -> Self {
        self.provider = Some(provider);
        self
    }

    pub fn config(&self) -> &FeedbackConfig {
        &self.config
    }

    /// Startup check: L4 needs a profiler provider.
    pub fn check_level(&self, level: FeedbackLevel) -> Result<()> {
        if level == FeedbackLevel::L4 && self.provider.is_none() {
            return Err(Error::Config("feedback level L4 requires a profiler provider".into()));
        }
        Ok(())
    }

    pub fn render_feedback(
        &self,
        verdict: &ClassifierVerdict,
        outcomes: &[ExecutionOutcome],
        level: FeedbackLevel,
    ) -> Result<FeedbackMessage> {
        self.render(verdict, outcomes, level, None)
    }

    /// Like `render_feedback`, for a correctness pass rejected by the gate.
    pub fn render_gate_feedback(
        &self,
        verdict: &ClassifierVerdict,
        outcomes: &[ExecutionOutcome],
        level: FeedbackLevel,
        gate: GateContext,
    ) -> Result<FeedbackMessage> {
        self.render(verdict, outcomes, level, Some(gate))
    }

    fn render(
        &self,
        verdict: &ClassifierVerdict,
        outcomes: &[ExecutionOutcome],
        level: FeedbackLevel,
        gate: Option<GateContext>,
    ) -> Result<FeedbackMessage> {
        self.check_level(level)?;
        if verdict.category == Category::Passed && gate.is_none() {
            return Err(Error::Invalid("no feedback for a passing iteration".into()));
        }
        let label = if gate.is_some() {
            Bucket::PerfBroken.as_str()
        } else {
            verdict.category.as_str()
        };
        let signature = if verdict.primary_signature.is_empty() {
            "none"
        } else {
            verdict.primary_signature.as_str()
        };
        let summary = format!("category: {label}, signature: {signature}");

        let body = match level {
            FeedbackLevel::L0 => String::new(),
            FeedbackLevel::L1 => format!("Previous attempt failed: {label}."),
            FeedbackLevel::L2 => format!("Previous attempt failed: {label}. Signature: {signature}."),
            FeedbackLevel::L3 => format!("{}\n[{summary}]", self.template_body(label, verdict, outcomes, gate)),
            FeedbackLevel::L3Raw => {
                let failing = failing_outcome(outcomes);
                let raw = failing
                    .map(|o| if o.stderr.trim().is_empty() { &o.stdout } else { &o.stderr })
                    .map(|s| tail(s, self.config.tail_lines))
                    .unwrap_or_default();
                raw
            }
            FeedbackLevel::L4 => {
                let mut body = format!("{}\n[{summary}]", self.template_body(label, verdict, outcomes, gate));
                let signals = self
                    .provider
                    .as_ref()
                    .map(|p| p.signals(outcomes))
                    .unwrap_or_default();
                body.push_str("\nProfiler signals:");
                if signals.is_empty() {
                    body.push_str(" none");
                }
                for (k, v) in signals {
                    body.push_str(&format!("\n{k}={v}"));
                }
                body
            }
        };
        let (body, truncated) = clip(body, self.config.char_budget);
        Ok(FeedbackMessage {
            body,
            level,
            category: verdict.category,
            truncated,
        })
    }

    fn template_body(
        &self,
        label: &str,
        verdict: &ClassifierVerdict,
        outcomes: &[ExecutionOutcome],
        gate: Option<GateContext>,
    ) -> String {
        let failing = failing_outcome(outcomes);
        let stderr = failing.map(|o| o.stderr.as_str()).unwrap_or("");
        let full_log = failing
            .map(|o| format!("{}{}", o.stdout, o.stderr))
            .unwrap_or_default();
        let field = |name: &str| {
            self.classifier
                .extract_field(name, &full_log)
                .unwrap_or_else(|| UNAVAILABLE.to_string())
        };

        let mut values: BTreeMap<&str, String> = BTreeMap::new();
        values.insert("category", label.to_string());
        values.insert("error_signature", verdict.primary_signature.clone());
        values.insert("head_lines", self.config.head_lines.to_string());
        values.insert("stderr_head", head(stderr, self.config.head_lines));
        values.insert("log_tail", tail(&full_log, self.config.tail_lines));
        values.insert("test_budget_s", self.config.test_budget_s.to_string());
        for name in ["shape", "tolerance", "max_abs_error", "mean_abs_error", "mismatches"] {
            values.insert(name, field(name));
        }
        values.insert("contract_diff", self.contract_diff(failing, stderr));
        if let Some(g) = gate {
            values.insert(
                "speedup",
                g.speedup
                    .map(|s| format!("{s:.2}x"))
                    .unwrap_or_else(|| UNAVAILABLE.to_string()),
            );
            values.insert("gate_p", format!("{}x", g.gate_p));
        }

        match self.templates.templates.get(label) {
            Some(t) => fill(t, &values),
            None => format!(
                "Your previous solution failed ({label}). The first {} lines of stderr are:\n{}",
                self.config.head_lines, values["stderr_head"]
            ),
        }
    }

    /// Log lines that tripped an integration rule; the stderr head otherwise.
    fn contract_diff(&self, failing: Option<&ExecutionOutcome>, stderr: &str) -> String {
        let Some(o) = failing else {
            return String::new();
        };
        let stage = RuleStage::of(o.stage);
        let text = format!("{}\n{}", o.stderr, o.stdout);
        let lines: Vec<&str> = text
            .lines()
            .filter(|line| {
                self.classifier
                    .matches(stage, line)
                    .iter()
                    .any(|(_, c)| *c == Category::Integration)
            })
            .collect();
        if lines.is_empty() {
            head(stderr, self.config.head_lines)
        } else {
            lines.join("\n")
        }
    }
}

fn failing_outcome(outcomes: &[ExecutionOutcome]) -> Option<&ExecutionOutcome> {
    outcomes.iter().find(|o| o.failed()).or_else(|| outcomes.last())
}

fn head(text: &str, n: usize) -> String {
    text.lines().take(n).collect::<Vec<_>>().join("\n")
}

fn tail(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

fn fill(template: &str, values: &BTreeMap<&str, String>) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn clip(body: String, budget: usize) -> (String, bool) {
    if body.chars().count() <= budget {
        return (body, false);
    }
    (body.chars().take(budget).collect(), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ExitStatus, Stage};

    fn renderer() -> FeedbackRenderer {
        FeedbackRenderer::builtin(Arc::new(Classifier::builtin()))
    }

    fn failed(stage: Stage, stdout: &str, stderr: &str) -> Vec<ExecutionOutcome> {
        vec![ExecutionOutcome {
            stage,
            exit_status: ExitStatus::Code(1),
            stdout: stdout.into(),
            stderr: stderr.into(),
            wall_time_ms: 1.0,
            sanitizer_log: None,
        }]
    }

    #[test]
    fn l3_buildability_starts_with_template() {
        let r = renderer();
        let outs = failed(Stage::Build, "", "solution.cu(3): error: expected a \";\"\nline two");
        let v = Classifier::builtin().classify_iteration(&outs);
        let m = r.render_feedback(&v, &outs, FeedbackLevel::L3).unwrap();
        assert!(m.body.starts_with("Your previous solution did not compile."));
        assert!(m.body.contains("line two"));
        assert!(!m.truncated);
    }

    #[test]
    fn l0_is_empty_and_l2_has_no_log() {
        let r = renderer();
        let outs = failed(Stage::Test, "max abs error: 0.5\noutputs differ", "");
        let v = Classifier::builtin().classify_iteration(&outs);
        assert_eq!(v.category, Category::FunctionalCorrectness);
        assert!(r.render_feedback(&v, &outs, FeedbackLevel::L0).unwrap().body.is_empty());
        let l2 = r.render_feedback(&v, &outs, FeedbackLevel::L2).unwrap().body;
        assert_eq!(
            l2,
            format!("Previous attempt failed: functional_correctness. Signature: {}.", v.primary_signature)
        );
        assert!(!l2.contains("0.5"));
    }

    #[test]
    fn functional_fields_fall_back_to_unavailable() {
        let r = renderer();
        let outs = failed(Stage::Test, "outputs differ", "");
        let v = Classifier::builtin().classify_iteration(&outs);
        let body = r.render_feedback(&v, &outs, FeedbackLevel::L3).unwrap().body;
        assert!(body.contains("tolerance=unavailable"));
    }

    #[test]
    fn l4_needs_provider() {
        let r = renderer();
        assert!(matches!(r.check_level(FeedbackLevel::L4), Err(Error::Config(_))));
        let r = renderer().with_provider(Arc::new(StubProfiler));
        assert!(r.check_level(FeedbackLevel::L4).is_ok());
    }

    #[test]
    fn budget_enforced() {
        let mut r = renderer();
        r.config.char_budget = 40;
        let outs = failed(Stage::Build, "", &"syntax error\n".repeat(100));
        let v = Classifier::builtin().classify_iteration(&outs);
        let m = r.render_feedback(&v, &outs, FeedbackLevel::L3).unwrap();
        assert!(m.truncated);
        assert_eq!(m.body.chars().count(), 40);
    }

    #[test]
    fn raw_is_stderr_tail() {
        let r = renderer();
        let stderr: String = (0..40).map(|i| format!("line {i}\n")).collect();
        let outs = failed(Stage::Build, "", &stderr);
        let v = Classifier::builtin().classify_iteration(&outs);
        let body = r.render_feedback(&v, &outs, FeedbackLevel::L3Raw).unwrap().body;
        assert!(body.starts_with("line 10\n"));
        assert!(body.ends_with("line 39"));
    }
}
