use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use repairbench::backend::{BackendHandle, BackendKind};
use repairbench::classifier::Classifier;
use repairbench::corpus::{self, ValidationStatus};
use repairbench::debug_loop::{ProtocolConfig, Sampling, StagnationThresholds};
use repairbench::desk_corpus;
use repairbench::error::{Error, Result};
use repairbench::feedback::FeedbackLevel;
use repairbench::fixer::load_fixers;
use repairbench::report::{self, AnalysisOptions, RunRequest, Schedule, SweepRequest};
use repairbench::robustness::Axis;

#[derive(Parser)]
#[command(name = "repairbench", version, about = "Debug-from-broken-start evaluation harness for GPU kernel repair")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check corpus manifests; with --execute, confirm each broken start fails as curated.
    Validate(ValidateArgs),
    /// Evaluate every fixer under one protocol and store the results.
    Run(RunArgs),
    /// One-at-a-time sweep over one protocol axis.
    Sweep(SweepArgs),
    /// Recompute metric tables from a result directory.
    Analyze(AnalyzeArgs),
    /// Tables and the evaluation card for a run plus stored sweeps.
    Report(ReportArgs),
    /// Generate the desk corpus and run it end to end with scripted fixers.
    Simulate(SimulateArgs),
    /// Write the synthetic desk corpus.
    Desk(DeskArgs),
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Execute each broken start twice on the backend.
    #[arg(long)]
    execute: bool,
    #[arg(long, default_value_t = 0.7)]
    gate: f64,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Parent directory for per-candidate sandboxes.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Serialize GPU use across processes through this lock file.
    #[arg(long)]
    gpu_lock: Option<PathBuf>,
    #[arg(long)]
    build_timeout: Option<u64>,
    #[arg(long)]
    test_timeout: Option<u64>,
    /// Compute capability of the local device, e.g. 80.
    #[arg(long)]
    sm: Option<u32>,
}

impl BackendArgs {
    fn handle(&self) -> BackendHandle {
        let mut h = BackendHandle::new(
            BackendKind::RawCompiler,
            self.workdir.clone().unwrap_or_else(std::env::temp_dir),
        );
        if let Some(t) = self.build_timeout {
            h.build_timeout_s = t;
        }
        if let Some(t) = self.test_timeout {
            h.test_timeout_s = t;
        }
        h.gpu_lock_path = self.gpu_lock.clone();
        h.available_sm = self.sm;
        h
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    TwoPhase,
    Naive,
}

#[derive(Args, Clone)]
struct ProtocolArgs {
    /// Protocol file; keys mirror the protocol configuration fields.
    #[arg(long)]
    protocol: Option<PathBuf>,
    /// Performance gate threshold.
    #[arg(short = 'p', long = "gate")]
    gate: Option<f64>,
    /// Iteration budget.
    #[arg(short = 'k', long)]
    k: Option<usize>,
    /// History depth.
    #[arg(long)]
    history: Option<usize>,
    /// Feedback level: L0, L1, L2, L3, L3_raw, L4.
    #[arg(long)]
    level: Option<String>,
    /// iterative or repeated; repeated also sets T=1.0 unless -T is given.
    #[arg(long)]
    sampling: Option<String>,
    #[arg(short = 'T', long)]
    temperature: Option<f64>,
    /// Oscillation threshold as m,w (transitions within the last w iterations).
    #[arg(long, value_parser = parse_pair)]
    oscillation: Option<(usize, usize)>,
    #[arg(long)]
    no_progress: Option<usize>,
    #[arg(long)]
    launches: Option<usize>,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected m,w")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

impl ProtocolArgs {
    fn resolve(&self) -> Result<ProtocolConfig> {
        let mut cfg = match &self.protocol {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("protocol file {}: {e}", p.display())))?
            }
            None => ProtocolConfig::default(),
        };
        if let Some(s) = &self.sampling {
            cfg = cfg.with_sampling(s.parse::<Sampling>()?);
        }
        if let Some(v) = self.gate {
            cfg.perf_gate_p = v;
        }
        if let Some(v) = self.k {
            cfg.k_budget = v;
        }
        if let Some(v) = self.history {
            cfg.history_depth = v;
        }
        if let Some(l) = &self.level {
            cfg.feedback_level = l.parse::<FeedbackLevel>()?;
        }
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        let mut st: StagnationThresholds = cfg.stagnation;
        if let Some(pair) = self.oscillation {
            st = st.with_oscillation(pair);
        }
        if let Some(c) = self.no_progress {
            st = st.with_no_progress(c);
        }
        cfg.stagnation = st;
        if let Some(n) = self.launches {
            cfg.timing_launches = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Fixer panel file.
    #[arg(long)]
    fixers: PathBuf,
    /// Parent of the timestamped result directory.
    #[arg(long, default_value = "results")]
    results: PathBuf,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, value_enum, default_value = "two-phase")]
    schedule: ScheduleArg,
    #[arg(long)]
    run_id: Option<String>,
    /// Use the scripted mock backend regardless of task manifests.
    #[arg(long)]
    mock: bool,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

impl RunArgs {
    fn request(&self, command: &str) -> Result<RunRequest> {
        let backend = if self.mock { BackendHandle::mock() } else { self.backend.handle() };
        Ok(RunRequest {
            corpus_root: existing(&self.corpus, "corpus root")?.to_path_buf(),
            fixers: load_fixers(existing(&self.fixers, "fixer panel")?)?,
            protocol: self.protocol.resolve()?,
            backend,
            results_root: self.results.clone(),
            concurrency: self.concurrency,
            schedule: match self.schedule {
                ScheduleArg::TwoPhase => Schedule::TwoPhase,
                ScheduleArg::Naive => Schedule::Naive,
            },
            run_id: self.run_id.clone(),
            command: command.to_string(),
        })
    }
}

#[derive(Args)]
struct SweepArgs {
    /// A1 (gate), A2 (sampling), A3 (feedback), A4 (history).
    #[arg(long)]
    axis: String,
    /// Include the profiler-signal level in an A3 sweep.
    #[arg(long)]
    with_l4: bool,
    /// A1 only: re-gate this stored run instead of calling fixers.
    #[arg(long)]
    from_run: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    dir: PathBuf,
    /// Re-score stored outcomes at this gate threshold.
    #[arg(long)]
    gate: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    fix_rate_gate: f64,
    /// Comma-separated tier-induction panel; defaults to every fixer in the run.
    #[arg(long, value_delimiter = ',')]
    panel: Option<Vec<String>>,
}

#[derive(Args)]
struct ReportArgs {
    dir: PathBuf,
    /// Stored sweep directories or sweep.json files.
    #[arg(long)]
    sweep: Vec<PathBuf>,
    /// Output directory; defaults to <dir>/report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Working root for the generated corpus and results.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

#[derive(Args)]
struct DeskArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A path named on the command line that does not exist is a usage problem.
fn existing<'a>(path: &'a Path, what: &str) -> Result<&'a Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn validate(args: &ValidateArgs) -> Result<bool> {
    let report = corpus::load_corpus(existing(&args.corpus, "corpus root")?)?;
    for e in &report.errors {
        eprintln!("invalid: {e}");
    }
    println!("{} tasks loaded, {} invalid", report.tasks.len(), report.errors.len());
    if !report.errors.is_empty() {
        return Err(Error::Config(format!("{} invalid corpus entries", report.errors.len())));
    }
    if !args.execute {
        return Ok(true);
    }
    let backend = args.backend.handle();
    backend.validate()?;
    let classifier = Classifier::builtin();
    let mut ok = true;
    for t in &report.tasks {
        let v = corpus::validate_task(t, &backend, &classifier, args.gate)?;
        let cats: Vec<&str> = v.categories.iter().map(|c| c.as_str()).collect();
        println!(
            "{}\t{:?}\t{}\t{}",
            v.task_id,
            v.status,
            cats.join(","),
            v.reason.as_deref().unwrap_or("")
        );
        ok &= v.status != ValidationStatus::NotReproducible;
    }
    Ok(ok)
}

fn print_analysis(dir: &Path, opts: &AnalysisOptions) -> Result<()> {
    let run = report::load_run(dir)?;
    let analysis = report::analyze(&run, opts)?;
    let out = report::write_analysis(dir, &analysis)?;
    print!("{}", analysis.files["metric_snapshot.tsv"]);
    println!("analysis written to {}", out.display());
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let desk = desk_corpus::generate_desk_corpus(&args.root.join("desk"), args.seed)?;
    let req = RunRequest {
        corpus_root: desk.corpus.clone(),
        fixers: load_fixers(&desk.fixers_file)?,
        protocol: args.protocol.resolve()?,
        backend: BackendHandle::mock(),
        results_root: args.root.join("results"),
        concurrency: args.concurrency,
        schedule: Schedule::TwoPhase,
        run_id: None,
        command: command_line(),
    };
    let summary = report::execute_run(&req)?;
    for (fixer, c) in &summary.calls {
        println!(
            "{fixer}: {} calls (N={}, |F|={}, bound {})",
            c.actual, c.n_tasks, c.phase1_failures, c.budget
        );
    }
    print_analysis(&summary.dir.path, &AnalysisOptions::default())?;
    println!("result directory {}", summary.dir.path.display());
    println!("elapsed {:.2} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Validate(a) => validate(&a),
        Command::Run(a) => {
            let summary = report::execute_run(&a.request(&command_line())?)?;
            print_analysis(&summary.dir.path, &AnalysisOptions::default())?;
            println!("result directory {}", summary.dir.path.display());
            Ok(true)
        }
        Command::Sweep(a) => {
            let axis: Axis = a.axis.parse()?;
            let req = SweepRequest {
                run: a.run.request(&command_line())?,
                axis,
                with_l4: a.with_l4,
                from_run: a.from_run.clone(),
            };
            let (dir, grid) = report::execute_sweep(&req)?;
            print!("{}", report::render_axis_table(&grid));
            println!("sweep written to {}", dir.path.display());
            Ok(true)
        }
        Command::Analyze(a) => {
            let opts = AnalysisOptions {
                gate: a.gate,
                fix_rate_gate: a.fix_rate_gate,
                panel: a.panel.clone(),
            };
            print_analysis(existing(&a.dir, "result directory")?, &opts)?;
            Ok(true)
        }
        Command::Report(a) => {
            let run = report::load_run(existing(&a.dir, "result directory")?)?;
            let sweeps = a
                .sweep
                .iter()
                .map(|p| report::load_sweep(p))
                .collect::<Result<Vec<_>>>()?;
            let files = report::build_report(&run, &sweeps)?;
            let out = a.out.clone().unwrap_or_else(|| a.dir.join("report"));
            for (name, body) in &files {
                let p = out.join(name);
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            }
            print!("{}", files["card.txt"]);
            println!("report written to {}", out.display());
            Ok(true)
        }
        Command::Simulate(a) => simulate(&a).map(|_| true),
        Command::Desk(a) => {
            let desk = desk_corpus::generate_desk_corpus(&a.out, a.seed)?;
            println!("corpus {}", desk.corpus.display());
            println!("fixers {}", desk.fixers_file.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
