//! Protocol-axis sweeps and ranking-stability analytics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Task, Tier, TierInduction};
use crate::debug_loop::{self, LoopEnv, ProtocolConfig, Sampling, Trajectory};
use crate::error::{Error, Result};
use crate::feedback::FeedbackLevel;
use crate::fixer::Fixer;
use crate::metrics::{self, MetricReport, TaskOutcome};

/// One-sided 95% point of the standard normal.
pub const Z_RESOLVED: f64 = 1.645;

pub const GATE_SWEEP: [f64; 8] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0, 1.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Axis {
    A1,
    A2,
    A3,
    A4,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::A1 => "A1",
            Axis::A2 => "A2",
            Axis::A3 => "A3",
            Axis::A4 => "A4",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Axis::A1 => "performance gate p",
            Axis::A2 => "sampling method",
            Axis::A3 => "feedback level",
            Axis::A4 => "history depth H",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A1" | "P" | "GATE" => Ok(Axis::A1),
            "A2" | "SAMPLING" => Ok(Axis::A2),
            "A3" | "FEEDBACK" => Ok(Axis::A3),
            "A4" | "H" | "HISTORY" => Ok(Axis::A4),
            _ => Err(Error::Config(format!("unknown axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "value")]
pub enum AxisSetting {
    Gate(f64),
    Sampling(Sampling),
    Feedback(FeedbackLevel),
    History(usize),
}

impl AxisSetting {
    pub fn axis(&self) -> Axis {
        match self {
            AxisSetting::Gate(_) => Axis::A1,
            AxisSetting::Sampling(_) => Axis::A2,
            AxisSetting::Feedback(_) => Axis::A3,
            AxisSetting::History(_) => Axis::A4,
        }
    }

    pub fn label(&self) -> String {
        match self {
            AxisSetting::Gate(p) => format!("p={p}"),
            AxisSetting::Sampling(s) => s.to_string(),
            AxisSetting::Feedback(l) => l.to_string(),
            AxisSetting::History(h) => format!("H={h}"),
        }
    }

    pub fn apply(&self, defaults: &ProtocolConfig) -> ProtocolConfig {
        let mut cfg = defaults.clone();
        match *self {
            AxisSetting::Gate(p) => cfg.perf_gate_p = p,
            AxisSetting::Sampling(s) => cfg = cfg.with_sampling(s),
            AxisSetting::Feedback(l) => cfg.feedback_level = l,
            AxisSetting::History(h) => cfg.history_depth = h,
        }
        cfg
    }

    pub fn is_default(&self, defaults: &ProtocolConfig) -> bool {
        match *self {
            AxisSetting::Gate(p) => p == defaults.perf_gate_p,
            AxisSetting::Sampling(s) => s == defaults.sampling,
            AxisSetting::Feedback(l) => l == defaults.feedback_level,
            AxisSetting::History(h) => h == defaults.history_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSweepPlan {
    pub axis: Axis,
    pub settings: Vec<AxisSetting>,
    pub defaults: ProtocolConfig,
}

impl AxisSweepPlan {
    /// The standard settings for an axis; `with_l4` adds L4 to A3.
    pub fn standard(axis: Axis, defaults: ProtocolConfig, with_l4: bool) -> AxisSweepPlan {
        let settings = match axis {
            Axis::A1 => GATE_SWEEP.iter().map(|p| AxisSetting::Gate(*p)).collect(),
            Axis::A2 => vec![
                AxisSetting::Sampling(Sampling::Iterative),
                AxisSetting::Sampling(Sampling::Repeated),
            ],
            Axis::A3 => {
                let mut v: Vec<AxisSetting> = FeedbackLevel::SWEEP.iter().map(|l| AxisSetting::Feedback(*l)).collect();
                if with_l4 {
                    v.push(AxisSetting::Feedback(FeedbackLevel::L4));
                }
                v
            }
            Axis::A4 => (1..=4).map(AxisSetting::History).collect(),
        };
        AxisSweepPlan {
            axis,
            settings,
            defaults,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.defaults.validate()?;
        if self.settings.len() < 2 {
            return Err(Error::Config(format!("sweep over {} needs at least two settings", self.axis)));
        }
        if let Some(s) = self.settings.iter().find(|s| s.axis() != self.axis) {
            return Err(Error::Config(format!(
                "setting {} does not belong to axis {}",
                s.label(),
                self.axis
            )));
        }
        for s in &self.settings {
            s.apply(&self.defaults).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub setting: AxisSetting,
    pub label: String,
    pub reports: BTreeMap<String, MetricReport>,
    /// Fixer calls spent on this cell.
    pub fixer_calls: usize,
    /// False when an A1 cell asks for a stricter gate than the stored run used.
    pub exact: bool,
    /// Per-fixer failures; the cell's other fixers are still reported.
    pub errors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axis: Axis,
    pub defaults: ProtocolConfig,
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    /// pass@k per setting label for one fixer, in plan order.
    pub fn scores(&self, fixer: &str) -> Vec<(String, f64)> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.reports
                    .get(fixer)
                    .and_then(|r| r.pass_at_k)
                    .map(|v| (c.label.clone(), v))
            })
            .collect()
    }

    pub fn fixers(&self) -> BTreeSet<String> {
        self.cells.iter().flat_map(|c| c.reports.keys().cloned()).collect()
    }

    /// Fixers with a report in every cell.
    pub fn full_coverage(&self) -> BTreeSet<String> {
        self.fixers()
            .into_iter()
            .filter(|f| self.cells.iter().all(|c| c.reports.contains_key(f)))
            .collect()
    }
}

/// Report for one fixer's trajectories under a config.
pub fn report_for(
    fixer: &str,
    trajectories: &[Trajectory],
    tasks: &[Task],
    cfg: &ProtocolConfig,
) -> (MetricReport, Vec<TaskOutcome>) {
    let outcomes = outcomes_for(trajectories, tasks);
    (
        metrics::compute_report(fixer, &outcomes, cfg.k_budget, cfg.perf_gate_p, 0.0),
        outcomes,
    )
}

pub fn outcomes_for(trajectories: &[Trajectory], tasks: &[Task]) -> Vec<TaskOutcome> {
    let specs: BTreeMap<&str, &crate::corpus::TaskSpec> =
        tasks.iter().map(|t| (t.spec.task_id.as_str(), &t.spec)).collect();
    trajectories
        .iter()
        .map(|t| TaskOutcome::from_trajectory(t, specs.get(t.task_id.as_str()).copied()))
        .collect()
}

/// A1 cells from stored outcomes: no fixer calls. `run_p` is the gate the
/// stored trajectories were produced with.
pub fn regate_cells(
    plan: &AxisSweepPlan,
    stored: &BTreeMap<String, Vec<TaskOutcome>>,
    run_p: f64,
) -> Vec<SweepCell> {
    plan.settings
        .iter()
        .map(|s| {
            let AxisSetting::Gate(p) = *s else {
                unreachable!("A1 plan holds gate settings")
            };
            let reports = stored
                .iter()
                .map(|(fixer, outs)| {
                    let regated: Vec<TaskOutcome> = outs.iter().map(|o| o.regate(p)).collect();
                    (
                        fixer.clone(),
                        metrics::compute_report(fixer, &regated, plan.defaults.k_budget, p, 0.0),
                    )
                })
                .collect();
            SweepCell {
                setting: *s,
                label: s.label(),
                reports,
                fixer_calls: 0,
                exact: p <= run_p,
                errors: BTreeMap::new(),
            }
        })
        .collect()
}

/// One evaluation per setting. A1 runs the loops once at the strictest gate
/// in the plan (unless `stored` outcomes are supplied) and re-gates; the
/// other axes re-run the loops per setting.
pub fn run_oat_sweep(
    plan: &AxisSweepPlan,
    panel: &[&dyn Fixer],
    tasks: &[Task],
    env: &LoopEnv,
    stored: Option<(&BTreeMap<String, Vec<TaskOutcome>>, f64)>,
) -> Result<SweepGrid> {
    plan.validate()?;
    if panel.is_empty() {
        return Err(Error::PanelRequired);
    }
    let cells = match plan.axis {
        Axis::A1 => match stored {
            Some((outcomes, run_p)) => regate_cells(plan, outcomes, run_p),
            None => {
                let p_max = plan
                    .settings
                    .iter()
                    .filter_map(|s| match s {
                        AxisSetting::Gate(p) => Some(*p),
                        _ => None,
                    })
                    .fold(0.0, f64::max);
                let cfg = AxisSetting::Gate(p_max).apply(&plan.defaults);
                let mut outcomes = BTreeMap::new();
                for m in panel {
                    let trajs = debug_loop::run_naive(&cfg, *m, tasks, env)?;
                    outcomes.insert(m.name().to_string(), outcomes_for(&trajs, tasks));
                }
                regate_cells(plan, &outcomes, p_max)
            }
        },
        _ => plan
            .settings
            .iter()
            .map(|s| {
                let cfg = s.apply(&plan.defaults);
                let mut cell = SweepCell {
                    setting: *s,
                    label: s.label(),
                    reports: BTreeMap::new(),
                    fixer_calls: 0,
                    exact: true,
                    errors: BTreeMap::new(),
                };
                for m in panel {
                    let name = m.name().to_string();
                    match debug_loop::run_naive(&cfg, *m, tasks, env) {
                        Ok(trajs) => {
                            cell.fixer_calls += trajs.iter().map(|t| t.records.len()).sum::<usize>();
                            let (report, _) = report_for(&name, &trajs, tasks, &cfg);
                            cell.reports.insert(name, report);
                        }
                        Err(e) => {
                            cell.errors.insert(name, e.to_string());
                        }
                    }
                }
                cell
            })
            .collect(),
    };
    Ok(SweepGrid {
        axis: plan.axis,
        defaults: plan.defaults.clone(),
        cells,
    })
}

/// max − min over the settings' scores, in the scores' units. A lower bound
/// on the axis-induced range.
pub fn swing(scores: &[f64]) -> Option<f64> {
    if scores.len() < 2 {
        return None;
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingVector {
    pub setting: String,
    /// Best first.
    pub fixers: Vec<String>,
}

impl RankingVector {
    pub fn new(setting: &str, fixers: &[&str]) -> RankingVector {
        RankingVector {
            setting: setting.to_string(),
            fixers: fixers.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Descending score; ties by ascending name.
    pub fn from_scores(setting: &str, scores: &BTreeMap<String, f64>) -> RankingVector {
        let mut v: Vec<(&String, f64)> = scores.iter().map(|(k, v)| (k, *v)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        RankingVector {
            setting: setting.to_string(),
            fixers: v.into_iter().map(|(k, _)| k.clone()).collect(),
        }
    }

    pub fn restricted_to(&self, keep: &BTreeSet<String>) -> RankingVector {
        RankingVector {
            setting: self.setting.clone(),
            fixers: self.fixers.iter().filter(|f| keep.contains(*f)).cloned().collect(),
        }
    }
}

/// (concordant − discordant) / (n(n−1)/2).
pub fn kendall_tau(r1: &RankingVector, r2: &RankingVector) -> Result<f64> {
    let n = r1.fixers.len();
    let pos2: BTreeMap<&str, usize> = r2
        .fixers
        .iter()
        .enumerate()
        .map(|(i, f)| (f.as_str(), i))
        .collect();
    let set1: BTreeSet<&str> = r1.fixers.iter().map(String::as_str).collect();
    if set1.len() != n || pos2.len() != r2.fixers.len() || set1 != pos2.keys().copied().collect() {
        return Err(Error::RankingMismatch(format!(
            "rankings `{}` and `{}` cover different fixers",
            r1.setting, r2.setting
        )));
    }
    if n < 2 {
        return Err(Error::RankingMismatch("need at least two fixers".into()));
    }
    let mut score: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            // r1 ranks i above j; concordant when r2 agrees.
            if pos2[r1.fixers[i].as_str()] < pos2[r1.fixers[j].as_str()] {
                score += 1;
            } else {
                score -= 1;
            }
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipResolution {
    pub pair: (String, String),
    pub mu: f64,
    pub mu_prime: f64,
    pub sigma: f64,
    pub sigma_prime: f64,
    pub z: f64,
    pub rho: f64,
    pub resolved: bool,
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// z = |μ − μ′| / √(σ² + σ′²), ρ = Φ(z). Zero variance with equal means is
/// reported as unresolved (z = 0).
pub fn flip_resolution(mu: f64, sigma: f64, mu_prime: f64, sigma_prime: f64) -> FlipResolution {
    let var = sigma * sigma + sigma_prime * sigma_prime;
    let diff = (mu - mu_prime).abs();
    let z = if var > 0.0 {
        diff / var.sqrt()
    } else if diff > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    FlipResolution {
        pair: (String::new(), String::new()),
        mu,
        mu_prime,
        sigma,
        sigma_prime,
        z,
        rho: normal_cdf(z),
        resolved: z >= Z_RESOLVED,
    }
}

/// pass@k per fixer per tier, on the induced partition.
pub fn tier_pass_at_k(
    outcomes: &BTreeMap<String, Vec<TaskOutcome>>,
    tiers: &TierInduction,
    k: usize,
) -> BTreeMap<String, BTreeMap<Tier, Option<f64>>> {
    outcomes
        .iter()
        .map(|(fixer, outs)| {
            let per_tier = Tier::ALL
                .iter()
                .map(|tier| {
                    let slice: Vec<TaskOutcome> = outs
                        .iter()
                        .filter(|o| tiers.tiers.get(&o.task_id).is_some_and(|t| t.tier == *tier))
                        .cloned()
                        .collect();
                    (*tier, metrics::pass_at_k_asymmetric(&slice, k))
                })
                .collect();
            (fixer.clone(), per_tier)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardRow {
    pub fixer: String,
    pub corpus_id: String,
    pub corpus_hash: String,
    pub k: usize,
    pub perf_gate_p: f64,
    pub sampling: Sampling,
    pub feedback_level: FeedbackLevel,
    pub history_depth: usize,
    pub temperature: f64,
    /// Whether any task in the corpus has this fixer as its source.
    pub asymmetric_rule_applies: bool,
    pub pass_at_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwingEntry {
    pub axis: Axis,
    pub settings: Vec<String>,
    /// Percentage points, per fixer.
    pub swing_pp: BTreeMap<String, Option<f64>>,
    /// Set when the default sits at one end of the swept range.
    pub one_sided: bool,
    pub inexact_settings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauEntry {
    pub axis: Axis,
    /// The setting, or `best` when each fixer's best setting is used.
    pub compared: String,
    pub tau: Option<f64>,
    pub fixers: Vec<String>,
    pub excluded: Vec<String>,
    /// Best first, over `fixers`.
    pub default_ranking: Vec<String>,
    pub ranking: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationCard {
    pub corpus_id: String,
    pub corpus_hash: String,
    pub rows: Vec<CardRow>,
    pub swings: Vec<SwingEntry>,
    pub taus: Vec<TauEntry>,
}

/// Assembles the card from default-protocol reports and any sweeps.
/// `source_fixers` lists fixers that produced at least one broken start.
pub fn emit_evaluation_card(
    defaults: &ProtocolConfig,
    reports: &BTreeMap<String, MetricReport>,
    sweeps: &[SweepGrid],
    corpus_id: &str,
    corpus_hash: &str,
    source_fixers: &BTreeSet<String>,
) -> Result<EvaluationCard> {
    if reports.is_empty() {
        return Err(Error::Invalid("evaluation card needs the default-protocol report".into()));
    }
    let rows = reports
        .iter()
        .map(|(fixer, r)| CardRow {
            fixer: fixer.clone(),
            corpus_id: corpus_id.to_string(),
            corpus_hash: corpus_hash.to_string(),
            k: defaults.k_budget,
            perf_gate_p: defaults.perf_gate_p,
            sampling: defaults.sampling,
            feedback_level: defaults.feedback_level,
            history_depth: defaults.history_depth,
            temperature: defaults.temperature,
            asymmetric_rule_applies: source_fixers.contains(fixer),
            pass_at_k: r.pass_at_k,
        })
        .collect();

    let default_scores: BTreeMap<String, f64> = reports
        .iter()
        .filter_map(|(f, r)| r.pass_at_k.map(|v| (f.clone(), v)))
        .collect();

    let mut swings = Vec::new();
    let mut taus = Vec::new();
    for grid in sweeps {
        let settings: Vec<String> = grid.cells.iter().map(|c| c.label.clone()).collect();
        let swing_pp = grid
            .fixers()
            .into_iter()
            .map(|f| {
                let scores: Vec<f64> = grid.scores(&f).into_iter().map(|(_, v)| v * 100.0).collect();
                (f, swing(&scores))
            })
            .collect();
        let default_idx = grid.cells.iter().position(|c| c.setting.is_default(&grid.defaults));
        swings.push(SwingEntry {
            axis: grid.axis,
            settings,
            swing_pp,
            one_sided: matches!(default_idx, Some(i) if i == 0 || i + 1 == grid.cells.len()),
            inexact_settings: grid.cells.iter().filter(|c| !c.exact).map(|c| c.label.clone()).collect(),
        });
        if grid.axis != Axis::A1 {
            taus.push(tau_entry(grid, &default_scores)?);
        }
    }

    Ok(EvaluationCard {
        corpus_id: corpus_id.to_string(),
        corpus_hash: corpus_hash.to_string(),
        rows,
        swings,
        taus,
    })
}

fn tau_entry(grid: &SweepGrid, default_scores: &BTreeMap<String, f64>) -> Result<TauEntry> {
    let covered: BTreeSet<String> = grid
        .full_coverage()
        .into_iter()
        .filter(|f| default_scores.contains_key(f))
        .collect();
    let all: BTreeSet<String> = grid.fixers().into_iter().chain(default_scores.keys().cloned()).collect();
    let excluded: Vec<String> = all.difference(&covered).cloned().collect();

    let others: Vec<&SweepCell> = grid
        .cells
        .iter()
        .filter(|c| !c.setting.is_default(&grid.defaults))
        .collect();
    let (compared, scores): (String, BTreeMap<String, f64>) = match others.as_slice() {
        [single] => (
            single.label.clone(),
            covered
                .iter()
                .filter_map(|f| single.reports[f].pass_at_k.map(|v| (f.clone(), v)))
                .collect(),
        ),
        _ => (
            "best".to_string(),
            covered
                .iter()
                .map(|f| {
                    let best = grid.scores(f).into_iter().map(|(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
                    (f.clone(), best)
                })
                .collect(),
        ),
    };
    let base: BTreeMap<String, f64> = covered
        .iter()
        .filter_map(|f| default_scores.get(f).map(|v| (f.clone(), *v)))
        .collect();
    let r_default = RankingVector::from_scores("default", &base);
    let r_other = RankingVector::from_scores(&compared, &scores);
    let tau = if r_default.fixers.len() >= 2 && r_default.fixers.len() == r_other.fixers.len() {
        Some(kendall_tau(&r_default, &r_other)?)
    } else {
        None
    };
    Ok(TauEntry {
        axis: grid.axis,
        compared,
        tau,
        fixers: covered.into_iter().collect(),
        excluded,
        default_ranking: r_default.fixers,
        ranking: r_other.fixers,
    })
}

impl EvaluationCard {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str("EVALUATION CARD\n");
        s.push_str(&format!("corpus: {} ({})\n\n", self.corpus_id, self.corpus_hash));
        s.push_str("fixer\tk\tp\tsampling\tfeedback\tH\tT\tasymmetric\tpass@k\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.fixer,
                r.k,
                r.perf_gate_p,
                r.sampling,
                r.feedback_level,
                r.history_depth,
                r.temperature,
                if r.asymmetric_rule_applies { "yes" } else { "no" },
                metrics::pct(r.pass_at_k)
            ));
        }
        if !self.swings.is_empty() {
            s.push_str("\nswing (pp, lower bound on protocol-induced range)\n");
            for w in &self.swings {
                s.push_str(&format!(
                    "{} {} [{}]{}\n",
                    w.axis,
                    w.axis.description(),
                    w.settings.join(", "),
                    if w.one_sided { " one-sided: default at range end" } else { "" }
                ));
                for (f, v) in &w.swing_pp {
                    s.push_str(&format!(
                        "  {f}\t{}\n",
                        v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())
                    ));
                }
                if !w.inexact_settings.is_empty() {
                    s.push_str(&format!(
                        "  lower-bound cells (gate stricter than stored run): {}\n",
                        w.inexact_settings.join(", ")
                    ));
                }
            }
        }
        if !self.taus.is_empty() {
            s.push_str("\nKendall tau vs default ranking\n");
            for t in &self.taus {
                s.push_str(&format!(
                    "{} vs {}\t{}\tfixers: {}",
                    t.axis,
                    t.compared,
                    t.tau.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into()),
                    t.fixers.join(", ")
                ));
                if !t.excluded.is_empty() {
                    s.push_str(&format!("\tsubset; excluded: {}", t.excluded.join(", ")));
                }
                s.push('\n');
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_basics() {
        let a = RankingVector::new("a", &["x", "y", "z"]);
        let rev = RankingVector::new("r", &["z", "y", "x"]);
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        assert_eq!(kendall_tau(&a, &rev).unwrap(), -1.0);
        let other = RankingVector::new("o", &["x", "y", "w"]);
        assert!(matches!(kendall_tau(&a, &other), Err(Error::RankingMismatch(_))));
    }

    #[test]
    fn flip_examples() {
        let f = flip_resolution(0.30, 0.03, 0.20, 0.03);
        assert!((f.z - 0.1 / (0.0018f64).sqrt()).abs() < 1e-12);
        assert!(f.resolved);
        let same = flip_resolution(0.4, 0.1, 0.4, 0.2);
        assert_eq!(same.z, 0.0);
        assert_eq!(same.rho, 0.5);
        assert!(!same.resolved);
        let degenerate = flip_resolution(0.4, 0.0, 0.4, 0.0);
        assert!(!degenerate.resolved);
    }

    #[test]
    fn swing_examples() {
        assert_eq!(swing(&[3.0, 3.0, 3.0]), Some(0.0));
        assert_eq!(swing(&[1.0]), None);
    }

    #[test]
    fn ranking_tie_break() {
        let scores: BTreeMap<String, f64> =
            [("b".to_string(), 0.5), ("a".to_string(), 0.5), ("c".to_string(), 0.9)].into();
        assert_eq!(RankingVector::from_scores("s", &scores).fixers, vec!["c", "a", "b"]);
    }

    #[test]
    fn plan_validation() {
        let mut plan = AxisSweepPlan::standard(Axis::A4, ProtocolConfig::default(), false);
        assert!(plan.validate().is_ok());
        plan.settings.push(AxisSetting::Gate(0.1));
        assert!(plan.validate().is_err());
        assert_eq!(AxisSweepPlan::standard(Axis::A1, ProtocolConfig::default(), false).settings.len(), 8);
    }
}
