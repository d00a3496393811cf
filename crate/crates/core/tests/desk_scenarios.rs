//! Runs every desk scenario through the real loop and checks the trajectory
//! against the scenario table, and the table against an independent replay
//! of the stop rules.

use std::collections::BTreeMap;

use repairbench::backend::BackendHandle;
use repairbench::classifier::{Category, Classifier};
use repairbench::corpus::{self, ValidationStatus};
use repairbench::debug_loop::{self, LoopEnv, ProtocolConfig, StopReason};
use repairbench::desk_corpus::{self, Behavior, ScenarioScript, DESK_FIXERS};
use repairbench::fixer::{load_fixers, Fixer};

/// Independent replay of the stop rules on declared (hash, category,
/// signature, passed) tuples, with the default thresholds.
fn oracle(sc: &ScenarioScript, fixer: &str, k: usize) -> (StopReason, Option<usize>, Vec<Category>) {
    let mut seen: Vec<(&str, Category, &str)> = Vec::new();
    for i in 1..=k {
        let v = sc.submission(fixer, i);
        let passed = matches!(&v.behavior, Behavior::Pass { ms, .. } if 3.0 / ms >= 0.7);
        seen.push((v.name, v.category, v.signature));
        let cats = seen.iter().map(|s| s.1).collect();
        if passed {
            return (StopReason::Passed, Some(i), cats);
        }
        let n = seen.len();
        if n >= 2 && seen[n - 1].0 == seen[n - 2].0 {
            return (StopReason::DuplicateCode, None, cats);
        }
        if n >= 3 && seen[..n - 2].iter().any(|s| s.0 == seen[n - 1].0) {
            return (StopReason::CodeCycle, None, cats);
        }
        let from = (n + 1).saturating_sub(5).max(2);
        let transitions = (from..=n).filter(|&t| seen[t - 1].1 != seen[t - 2].1).count();
        if n >= 2 && transitions >= 3 {
            return (StopReason::CategoryOscillation, None, cats);
        }
        if n >= 3 && seen[n - 3..].iter().all(|s| (s.1, s.2) == (seen[n - 1].1, seen[n - 1].2)) {
            return (StopReason::NoProgress, None, cats);
        }
        if i == k {
            return (StopReason::MaxIterations, None, cats);
        }
    }
    unreachable!()
}

#[test]
fn scenario_table_matches_replayed_rules() {
    for sc in desk_corpus::scenarios() {
        for p in &sc.plans {
            let (stop, at, cats) = oracle(&sc, p.fixer, 5);
            assert_eq!(stop, p.expected.stop_reason, "{} {}", sc.name, p.fixer);
            assert_eq!(at, p.expected.passed_at, "{} {}", sc.name, p.fixer);
            assert_eq!(cats, p.expected.categories, "{} {}", sc.name, p.fixer);
        }
    }
}

#[test]
fn loop_reproduces_every_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let desk = desk_corpus::generate_desk_corpus(dir.path(), 7).unwrap();
    let report = corpus::load_corpus(&desk.corpus).unwrap();
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    let tasks = report.tasks;
    let fixers: Vec<Box<dyn Fixer>> = load_fixers(&desk.fixers_file)
        .unwrap()
        .iter()
        .map(|f| f.build().unwrap())
        .collect();
    assert_eq!(fixers.len(), DESK_FIXERS.len());

    let env = LoopEnv::new(BackendHandle::mock());
    let cfg = ProtocolConfig::default();
    let scenarios: BTreeMap<String, ScenarioScript> =
        desk_corpus::scenarios().into_iter().map(|s| (s.task_id(), s)).collect();
    for fixer in &fixers {
        let trajs = debug_loop::run_naive(&cfg, fixer.as_ref(), &tasks, &env).unwrap();
        for t in &trajs {
            let sc = &scenarios[&t.task_id];
            let exp = &sc.plan(fixer.name()).expected;
            let cats: Vec<Category> = t.records.iter().map(|r| r.category).collect();
            assert_eq!(t.stop_reason, exp.stop_reason, "{} {}", sc.name, fixer.name());
            assert_eq!(t.passed_at(), exp.passed_at, "{} {}", sc.name, fixer.name());
            assert_eq!(cats, exp.categories, "{} {}", sc.name, fixer.name());
            for (i, r) in t.records.iter().enumerate() {
                let v = sc.submission(fixer.name(), i + 1);
                if !v.signature.is_empty() {
                    assert_eq!(r.primary_signature, v.signature, "{} {} it{}", sc.name, fixer.name(), i + 1);
                }
            }
        }
    }
}

#[test]
fn timing_scenario_flags_and_fallbacks() {
    let dir = tempfile::tempdir().unwrap();
    let desk = desk_corpus::generate_desk_corpus(dir.path(), 1).unwrap();
    let tasks = corpus::load_corpus(&desk.corpus).unwrap().tasks;
    let task: Vec<_> = tasks.into_iter().filter(|t| t.stem == "desk_12_timing_fallback").collect();
    let env = LoopEnv::new(BackendHandle::mock());
    let cfg = ProtocolConfig::default();
    let by_name: BTreeMap<String, Box<dyn Fixer>> = load_fixers(&desk.fixers_file)
        .unwrap()
        .iter()
        .map(|f| (f.name.clone(), f.build().unwrap()))
        .collect();

    let a = debug_loop::run_task_loop(&cfg, by_name["desk-a"].as_ref(), &task[0], &env).unwrap();
    let r = &a.records[0];
    assert!(r.timing_fallback);
    assert_eq!(r.cv, None);
    assert!((r.speedup.unwrap() - 1.5).abs() < 1e-9);

    let b = debug_loop::run_task_loop(&cfg, by_name["desk-b"].as_ref(), &task[0], &env).unwrap();
    let r = &b.records[0];
    assert!(!r.timing_fallback);
    assert!(r.cv_flagged);
    // launches: nine at 2.0 ms, one at 2.4 ms
    assert!((r.cv.unwrap() - 0.12 / 2.04).abs() < 1e-9);
    assert!((r.speedup.unwrap() - 3.0 / 2.04).abs() < 1e-9);
}

#[test]
fn broken_starts_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let desk = desk_corpus::generate_desk_corpus(dir.path(), 3).unwrap();
    let tasks = corpus::load_corpus(&desk.corpus).unwrap().tasks;
    let classifier = Classifier::builtin();
    let backend = BackendHandle::mock();
    let scenarios: BTreeMap<String, ScenarioScript> =
        desk_corpus::scenarios().into_iter().map(|s| (s.task_id(), s)).collect();
    for t in &tasks {
        let v = corpus::validate_task(t, &backend, &classifier, 0.7).unwrap();
        assert_eq!(v.status, ValidationStatus::Reproducible, "{}: {:?}", t.spec.task_id, v.reason);
        assert_eq!(v.categories[0], scenarios[&t.spec.task_id].variants[0].category);
    }
    // At p = 0 the slow-but-correct start passes outright.
    let perf = tasks.iter().find(|t| t.stem == "desk_07_perf_broken").unwrap();
    let v = corpus::validate_task(perf, &backend, &classifier, 0.0).unwrap();
    assert_eq!(v.status, ValidationStatus::NotReproducible);
}

#[test]
fn every_category_is_exercised() {
    let mut seen = std::collections::BTreeSet::new();
    for sc in desk_corpus::scenarios() {
        for v in &sc.variants {
            seen.insert(v.category);
        }
    }
    assert_eq!(seen.len(), Category::ALL.len());
}
