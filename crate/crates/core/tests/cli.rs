//! End-to-end runs of the `repairbench` binary on the desk corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_repairbench");

fn rb(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(cwd).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn desk(dir: &Path) {
    let o = rb(dir, &["desk", "--out", "d"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn run(dir: &Path, results: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["run", "--corpus", "d/corpus", "--fixers", "d/fixers.json", "--mock", "--results", results];
    args.extend_from_slice(extra);
    let o = rb(dir, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let line = stdout.lines().find_map(|l| l.strip_prefix("result directory ")).unwrap();
    dir.join(line)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn count_files(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.map(|e| {
                let p = e.unwrap().path();
                if p.is_dir() {
                    count_files(&p)
                } else {
                    1
                }
            })
            .sum()
        })
        .unwrap_or(0)
}

#[test]
fn validate_desk_corpus() {
    let dir = tempfile::tempdir().unwrap();
    desk(dir.path());
    let o = rb(dir.path(), &["validate", "--corpus", "d/corpus", "--execute"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.matches("Reproducible").count(), 14);
    // Every broken start must fail; at p = 0 the slow-but-correct one does not.
    let o = rb(dir.path(), &["validate", "--corpus", "d/corpus", "--execute", "--gate", "0"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    desk(dir.path());
    let o = rb(dir.path(), &["run", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage:"));

    let base = ["run", "--corpus", "d/corpus", "--fixers", "d/fixers.json", "--mock", "--results", "r"];
    for extra in [&["--level", "L9"][..], &["--level", "L4"], &["-p", "-1"], &["-k", "0"], &["--oscillation", "3"]] {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        let o = rb(dir.path(), &args);
        assert_eq!(code(&o), 2, "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = rb(dir.path(), &["run", "--corpus", "missing", "--fixers", "d/fixers.json", "--mock"]);
    assert_eq!(code(&o), 2);
    let o = rb(dir.path(), &["analyze", "no-such-run"]);
    assert_eq!(code(&o), 2);
    // Nothing ran, so nothing was written.
    assert!(!dir.path().join("r").exists() || count_files(&dir.path().join("r")) == 0);
    assert!(!dir.path().join("results").exists());

    let o = rb(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn metric_snapshot_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    desk(dir.path());
    let run_dir = run(dir.path(), "r", &[]);
    let golden = read(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/desk_metric_snapshot.tsv"));
    assert_eq!(read(&run_dir.join("analysis/metric_snapshot.tsv")), golden);

    let o = rb(dir.path(), &["analyze", run_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(read(&run_dir.join("analysis/metric_snapshot.tsv")), golden);
}

#[test]
fn regated_analysis_matches_fresh_run_without_execution() {
    let dir = tempfile::tempdir().unwrap();
    desk(dir.path());
    let strict = run(dir.path(), "r", &["-p", "0.7"]);
    let loose = run(dir.path(), "r", &["-p", "0"]);

    let responses_before = count_files(&strict.join("responses"));
    let calls_before = read(&strict.join("calls.json"));
    let o = rb(dir.path(), &["analyze", strict.to_str().unwrap(), "--gate", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(count_files(&strict.join("responses")), responses_before);
    assert_eq!(read(&strict.join("calls.json")), calls_before);

    let fix_rate = read(&strict.join("analysis/fix_rate_by_bucket.tsv"));
    assert!(fix_rate.starts_with("# fix_rate at p=0"));
    assert_eq!(fix_rate, read(&loose.join("analysis/fix_rate_by_bucket.tsv")));
    assert!(fix_rate.contains("desk-a\t71.4 (7)\t50.0 (2)\t100.0 (1)\t33.3 (3)\t0.0 (1)"));
}

#[test]
fn runs_use_disjoint_directories_with_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    desk(dir.path());
    let a = run(dir.path(), "r", &[]);
    let b = run(dir.path(), "r", &[]);
    assert_ne!(a, b);
    for d in [&a, &b] {
        assert!(d.join("config.json").is_file());
        assert!(d.join("manifest.jsonl").is_file());
        for sub in ["responses", "logs", "solutions"] {
            assert!(count_files(&d.join(sub)) > 0, "{} empty in {}", sub, d.display());
        }
        let config: serde_json::Value = serde_json::from_str(&read(&d.join("config.json"))).unwrap();
        assert!(config["corpus_hash"].as_str().is_some_and(|h| !h.is_empty()));
        assert_eq!(config["protocol"]["k_budget"], 5);
    }
    // Same inputs, same trajectories.
    let rows = |d: &Path| -> Vec<serde_json::Value> {
        read(&d.join("manifest.jsonl"))
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                let o = v.as_object_mut().unwrap();
                o.remove("run_id");
                o.remove("recorded_at");
                o.remove("wall_time_ms");
                v
            })
            .collect()
    };
    assert_eq!(rows(&a), rows(&b));
}

#[test]
fn simulate_prints_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let o = rb(dir.path(), &["simulate", "--root", "sim"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("desk-a\t14.3\t41.7\t50.0\t83.3\tno_progress"), "{stdout}");
}
