//! Deterministic eight-category failure classifier.
//!
//! Each iteration's staged outcomes are dispatched against a frozen, versioned
//! pattern file. Stages are walked in execution order and the first stage that
//! failed assigns the category. Within that stage the rules are evaluated in
//! category priority order; a failed stage with no matching rule falls through
//! to `buildability` (compile-time stages) or `functional_correctness`
//! (runtime stages). If rules of two or more distinct categories match inside
//! the deciding stage the verdict is flagged `unclassified`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{ExecutionOutcome, Stage};
use crate::error::{Error, Result};

/// Signature recorded for iterations where the fixer never produced a response.
pub const FIXER_UNAVAILABLE_SIGNATURE: &str = "fixer_unavailable";

const BUILTIN_PATTERNS: &str = include_str!("../assets/patterns.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    EnvironmentDependency,
    Integration,
    Buildability,
    OutOfMemory,
    IllegalMemoryAccess,
    Timeout,
    FunctionalCorrectness,
    Passed,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::EnvironmentDependency,
        Category::Integration,
        Category::Buildability,
        Category::OutOfMemory,
        Category::IllegalMemoryAccess,
        Category::Timeout,
        Category::FunctionalCorrectness,
        Category::Passed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::EnvironmentDependency => "environment_dependency",
            Category::Integration => "integration",
            Category::Buildability => "buildability",
            Category::OutOfMemory => "out_of_memory",
            Category::IllegalMemoryAccess => "illegal_memory_access",
            Category::Timeout => "timeout",
            Category::FunctionalCorrectness => "functional_correctness",
            Category::Passed => "passed",
        }
    }

    /// Position in the taxonomy table, 0-based.
    pub fn index(self) -> usize {
        Category::ALL.iter().position(|c| *c == self).unwrap()
    }

    /// Coarse severity level: compile-time < memory/timeout < wrong output < passed.
    pub fn severity(self) -> u8 {
        match self {
            Category::Buildability | Category::Integration | Category::EnvironmentDependency => 0,
            Category::OutOfMemory | Category::IllegalMemoryAccess | Category::Timeout => 1,
            Category::FunctionalCorrectness => 2,
            Category::Passed => 3,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown category `{s}`")))
    }
}

/// Five-bucket collapse of the taxonomy, plus `perf_broken` for correct but
/// gate-failing candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    CompileError,
    MemoryCrash,
    Timeout,
    LogicError,
    PerfBroken,
    Passed,
}

impl Bucket {
    pub const ALL: [Bucket; 6] = [
        Bucket::CompileError,
        Bucket::MemoryCrash,
        Bucket::Timeout,
        Bucket::LogicError,
        Bucket::PerfBroken,
        Bucket::Passed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::CompileError => "compile_error",
            Bucket::MemoryCrash => "memory_crash",
            Bucket::Timeout => "timeout",
            Bucket::LogicError => "logic_error",
            Bucket::PerfBroken => "perf_broken",
            Bucket::Passed => "passed",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Bucket::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown bucket `{s}`")))
    }
}

pub fn collapse_to_bucket(category: Category, perf_gate_failed: bool) -> Bucket {
    match category {
        Category::EnvironmentDependency | Category::Integration | Category::Buildability => {
            Bucket::CompileError
        }
        Category::OutOfMemory | Category::IllegalMemoryAccess => Bucket::MemoryCrash,
        Category::Timeout => Bucket::Timeout,
        Category::FunctionalCorrectness => Bucket::LogicError,
        Category::Passed if perf_gate_failed => Bucket::PerfBroken,
        Category::Passed => Bucket::Passed,
    }
}

/// Which log stream a rule applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleStage {
    Preflight,
    Build,
    Runtime,
    Sanitizer,
}

impl RuleStage {
    pub fn of(stage: Stage) -> RuleStage {
        match stage {
            Stage::Preflight => RuleStage::Preflight,
            Stage::Build => RuleStage::Build,
            Stage::Run | Stage::Test => RuleStage::Runtime,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternRule {
    pub id: String,
    pub category: Category,
    pub stages: Vec<RuleStage>,
    pub pattern: String,
}

/// On-disk pattern file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternFile {
    pub version: String,
    pub rules: Vec<PatternRule>,
    /// Named single-capture extractors used by feedback rendering.
    #[serde(default)]
    pub fields: BTreeMap<String, String>,
}

impl PatternFile {
    pub fn builtin() -> PatternFile {
        serde_json::from_str(BUILTIN_PATTERNS).expect("builtin pattern file is valid")
    }

    pub fn from_json(text: &str) -> Result<PatternFile> {
        serde_json::from_str(text).map_err(|e| Error::json("pattern file", e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierVerdict {
    pub category: Category,
    pub bucket: Bucket,
    pub primary_signature: String,
    pub unclassified: bool,
    pub matched_stage: Option<Stage>,
}

impl ClassifierVerdict {
    pub fn passed() -> Self {
        ClassifierVerdict {
            category: Category::Passed,
            bucket: Bucket::Passed,
            primary_signature: String::new(),
            unclassified: false,
            matched_stage: None,
        }
    }

    pub fn fixer_unavailable() -> Self {
        ClassifierVerdict {
            category: Category::Buildability,
            bucket: Bucket::CompileError,
            primary_signature: FIXER_UNAVAILABLE_SIGNATURE.to_string(),
            unclassified: false,
            matched_stage: None,
        }
    }
}

#[derive(Debug)]
struct CompiledRule {
    id: String,
    category: Category,
    stages: Vec<RuleStage>,
    regex: Regex,
}

/// A compiled pattern file.
#[derive(Debug)]
pub struct Classifier {
    version: String,
    rules: Vec<CompiledRule>,
    fields: BTreeMap<String, Regex>,
}

const COMPILE_PRIORITY: [Category; 5] = [
    Category::EnvironmentDependency,
    Category::Integration,
    Category::Buildability,
    Category::OutOfMemory,
    Category::Timeout,
];

const RUNTIME_PRIORITY: [Category; 7] = [
    Category::EnvironmentDependency,
    Category::Integration,
    Category::Buildability,
    Category::OutOfMemory,
    Category::IllegalMemoryAccess,
    Category::Timeout,
    Category::FunctionalCorrectness,
];

fn priority(stage: RuleStage) -> &'static [Category] {
    match stage {
        RuleStage::Preflight | RuleStage::Build => &COMPILE_PRIORITY,
        RuleStage::Runtime | RuleStage::Sanitizer => &RUNTIME_PRIORITY,
    }
}

fn compile(pattern: &str) -> Result<Regex> {
    Regex::new(pattern).map_err(|e| Error::Pattern {
        pattern: pattern.to_string(),
        message: e.to_string(),
    })
}

impl Classifier {
    pub fn new(file: &PatternFile) -> Result<Classifier> {
        let mut rules = Vec::with_capacity(file.rules.len());
        for rule in &file.rules {
            if rule.category == Category::Passed {
                return Err(Error::Config(format!(
                    "rule `{}` targets `passed`, which has no patterns",
                    rule.id
                )));
            }
            rules.push(CompiledRule {
                id: rule.id.clone(),
                category: rule.category,
                stages: rule.stages.clone(),
                regex: compile(&rule.pattern)?,
            });
        }
        let mut fields = BTreeMap::new();
        for (name, pattern) in &file.fields {
            let regex = compile(pattern)?;
            if regex.captures_len() != 2 {
                return Err(Error::Pattern {
                    pattern: pattern.clone(),
                    message: "field extractors need exactly one capture group".into(),
                });
            }
            fields.insert(name.clone(), regex);
        }
        Ok(Classifier {
            version: file.version.clone(),
            rules,
            fields,
        })
    }

    pub fn builtin() -> Classifier {
        Classifier::new(&PatternFile::builtin()).expect("builtin patterns compile")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Rule ids and categories matching `text` for the given stage, in file order.
    pub fn matches<'a>(&'a self, stage: RuleStage, text: &str) -> Vec<(&'a str, Category)> {
        self.rules
            .iter()
            .filter(|r| r.stages.contains(&stage) && r.regex.is_match(text))
            .map(|r| (r.id.as_str(), r.category))
            .collect()
    }

    /// First capture of the named field extractor over `text`.
    pub fn extract_field(&self, name: &str, text: &str) -> Option<String> {
        let regex = self.fields.get(name)?;
        text.lines()
            .find_map(|line| regex.captures(line))
            .and_then(|c| c.get(1))
            .map(|m| m.as_str().trim().to_string())
    }

    pub fn classify_iteration(&self, outcomes: &[ExecutionOutcome]) -> ClassifierVerdict {
        let Some(fired) = outcomes.iter().find(|o| o.failed()) else {
            return ClassifierVerdict::passed();
        };
        let stage = RuleStage::of(fired.stage);
        let text = scan_text(fired);
        let matched = self.matches(stage, &text);

        let mut distinct: Vec<Category> = matched.iter().map(|(_, c)| *c).collect();
        distinct.sort();
        distinct.dedup();

        let winner = priority(stage)
            .iter()
            .find(|cat| distinct.contains(cat))
            .copied();

        let (mut category, mut signature) = match winner {
            Some(cat) => {
                let id = matched.iter().find(|(_, c)| *c == cat).unwrap().0;
                (cat, id.to_string())
            }
            None if stage == RuleStage::Runtime => (
                Category::FunctionalCorrectness,
                "unmatched_runtime_failure".to_string(),
            ),
            None => (Category::Buildability, "unmatched_build_failure".to_string()),
        };

        if stage == RuleStage::Runtime && category == Category::FunctionalCorrectness {
            if let Some(log) = fired.sanitizer_log.as_deref() {
                if let Some((id, _)) = self
                    .matches(RuleStage::Sanitizer, log)
                    .into_iter()
                    .find(|(_, c)| *c == Category::IllegalMemoryAccess)
                {
                    category = Category::IllegalMemoryAccess;
                    signature = id.to_string();
                }
            }
        }

        ClassifierVerdict {
            category,
            bucket: collapse_to_bucket(category, false),
            primary_signature: signature,
            unclassified: distinct.len() >= 2,
            matched_stage: Some(fired.stage),
        }
    }
}

/// Text the rules are matched against: both streams plus the watchdog line
/// for timed-out stages.
fn scan_text(outcome: &ExecutionOutcome) -> String {
    let mut text = String::with_capacity(outcome.stdout.len() + outcome.stderr.len() + 32);
    text.push_str(&outcome.stderr);
    text.push('\n');
    text.push_str(&outcome.stdout);
    if outcome.exit_status.is_timeout() {
        let label = if outcome.stage == Stage::Build {
            "BUILD"
        } else {
            "TEST"
        };
        text.push_str(&format!("\n{label} TIMEOUT after {:.0} ms\n", outcome.wall_time_ms));
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ExitStatus;

    fn outcome(stage: Stage, exit: ExitStatus, stderr: &str) -> ExecutionOutcome {
        ExecutionOutcome {
            stage,
            exit_status: exit,
            stdout: String::new(),
            stderr: stderr.to_string(),
            wall_time_ms: 1.0,
            sanitizer_log: None,
        }
    }

    fn ok(stage: Stage) -> ExecutionOutcome {
        outcome(stage, ExitStatus::Code(0), "")
    }

    #[test]
    fn unsupported_arch_is_environment() {
        let c = Classifier::builtin();
        let v = c.classify_iteration(&[outcome(
            Stage::Build,
            ExitStatus::Code(1),
            "nvcc fatal   : Unsupported gpu architecture 'compute_120'",
        )]);
        assert_eq!(v.category, Category::EnvironmentDependency);
        assert_eq!(v.primary_signature, "unsupported_gpu_arch");
        assert!(!v.unclassified);
    }

    #[test]
    fn clean_run_passes_with_empty_signature() {
        let c = Classifier::builtin();
        let v = c.classify_iteration(&[ok(Stage::Build), ok(Stage::Test)]);
        assert_eq!(v, ClassifierVerdict::passed());
    }

    #[test]
    fn build_fallthrough() {
        let c = Classifier::builtin();
        let v = c.classify_iteration(&[outcome(
            Stage::Build,
            ExitStatus::Code(2),
            "zxqv unrecognized gibberish",
        )]);
        assert_eq!(v.category, Category::Buildability);
        assert_eq!(v.primary_signature, "unmatched_build_failure");
    }

    #[test]
    fn runtime_fallthrough() {
        let c = Classifier::builtin();
        let v = c.classify_iteration(&[
            ok(Stage::Build),
            outcome(Stage::Test, ExitStatus::Code(3), "zxqv"),
        ]);
        assert_eq!(v.category, Category::FunctionalCorrectness);
        assert_eq!(v.matched_stage, Some(Stage::Test));
    }

    #[test]
    fn multi_category_match_is_flagged() {
        let c = Classifier::builtin();
        let v = c.classify_iteration(&[outcome(
            Stage::Build,
            ExitStatus::Code(1),
            "solution.cu: No such file or directory\nerror: syntax error near token",
        )]);
        assert!(v.unclassified);
        assert_eq!(v.category, Category::Integration);
    }

    #[test]
    fn timeout_marker_classifies_as_timeout() {
        let c = Classifier::builtin();
        let v = c.classify_iteration(&[
            ok(Stage::Build),
            outcome(Stage::Run, ExitStatus::Timeout, ""),
        ]);
        assert_eq!(v.category, Category::Timeout);
        let v = c.classify_iteration(&[outcome(Stage::Build, ExitStatus::Timeout, "")]);
        assert_eq!(v.category, Category::Timeout);
    }

    #[test]
    fn sanitizer_overrides_functional_only() {
        let c = Classifier::builtin();
        let mut failing = outcome(Stage::Test, ExitStatus::Code(1), "outputs differ at 3");
        failing.sanitizer_log = Some("========= Invalid __global__ write of size 4".into());
        let v = c.classify_iteration(&[ok(Stage::Build), failing.clone()]);
        assert_eq!(v.category, Category::IllegalMemoryAccess);
        assert_eq!(v.primary_signature, "illegal_address");

        let mut oom = failing;
        oom.stderr = "CUDA out of memory".into();
        let v = c.classify_iteration(&[ok(Stage::Build), oom]);
        assert_eq!(v.category, Category::OutOfMemory);
    }

    #[test]
    fn collapse_truth_table() {
        for cat in Category::ALL {
            for gate in [false, true] {
                let b = collapse_to_bucket(cat, gate);
                let expected = match (cat.index(), gate) {
                    (0..=2, _) => Bucket::CompileError,
                    (3..=4, _) => Bucket::MemoryCrash,
                    (5, _) => Bucket::Timeout,
                    (6, _) => Bucket::LogicError,
                    (7, true) => Bucket::PerfBroken,
                    (7, false) => Bucket::Passed,
                    _ => unreachable!(),
                };
                assert_eq!(b, expected, "{cat} gate={gate}");
            }
        }
    }

    #[test]
    fn rejects_bad_field_extractor() {
        let mut file = PatternFile::builtin();
        file.fields.insert("broken".into(), "no groups".into());
        assert!(matches!(Classifier::new(&file), Err(Error::Pattern { .. })));
    }

    #[test]
    fn extracts_fields() {
        let c = Classifier::builtin();
        let log = "checking\nmax abs error=0.25 mean abs error = 0.01 tolerance=1e-3\nshape: 1024x1024\n";
        assert_eq!(c.extract_field("tolerance", log).as_deref(), Some("1e-3"));
        assert_eq!(c.extract_field("max_abs_error", log).as_deref(), Some("0.25"));
        assert_eq!(c.extract_field("mean_abs_error", log).as_deref(), Some("0.01"));
        assert_eq!(c.extract_field("shape", log).as_deref(), Some("1024x1024"));
        assert_eq!(c.extract_field("mismatches", log), None);
    }
}
