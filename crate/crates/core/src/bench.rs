//! Benchmark harness: solving suites of instance files, gap to best-known
//! values, report tables and Gantt charts.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{validate_schedule, Schedule};
use crate::error::{Error, Result};
use crate::instance::{parse_instance, FjspInstance, Time};
use crate::pdr::{run_pdr, Rule};
use crate::policy::{policy_rollout_timed, DecodeMode, Policy, RolloutTiming};

/// Relative excess over the best-known makespan, in percent.
pub fn gap(makespan: f64, best_known: f64) -> Result<f64> {
    if !(best_known > 0.0) {
        return Err(Error::Contract(format!(
            "best-known makespan must be positive, got {best_known}"
        )));
    }
    Ok((makespan / best_known - 1.0) * 100.0)
}

#[derive(Debug, Clone)]
pub enum Solver {
    Rule(Rule),
    Policy(Arc<Policy>),
}

impl Solver {
    pub fn name(&self) -> String {
        match self {
            Solver::Rule(r) => r.name().to_string(),
            Solver::Policy(_) => "policy".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    /// Best of `n_traj` sampled episodes.
    Sample { n_traj: usize, seed: u64 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Sample { .. } => "sample",
        }
    }
}

/// Best of `n_traj` sampled episodes; ties keep the earliest.
pub fn evaluate_sampling(
    policy: &Policy,
    inst: Arc<FjspInstance>,
    n_traj: usize,
    seed: u64,
) -> Result<Schedule> {
    sample_best(policy, inst, n_traj, seed).map(|(s, _)| s)
}

fn sample_best(
    policy: &Policy,
    inst: Arc<FjspInstance>,
    n_traj: usize,
    seed: u64,
) -> Result<(Schedule, RolloutTiming)> {
    if n_traj == 0 {
        return Err(Error::Contract("n_traj must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Schedule> = None;
    let mut total = RolloutTiming::default();
    for _ in 0..n_traj {
        let (s, t) = policy_rollout_timed(policy, inst.clone(), DecodeMode::Sample, &mut rng)?;
        total.model += t.model;
        total.env += t.env;
        if best.as_ref().is_none_or(|b| s.makespan < b.makespan) {
            best = Some(s);
        }
    }
    Ok((best.expect("n_traj >= 1"), total))
}

/// Solve one instance. Dispatching rules are deterministic, so they ignore
/// the strategy.
pub fn solve(solver: &Solver, strategy: Strategy, inst: Arc<FjspInstance>) -> Result<(Schedule, RolloutTiming)> {
    match solver {
        Solver::Rule(r) => {
            let t0 = Instant::now();
            let s = run_pdr(inst, *r)?;
            Ok((
                s,
                RolloutTiming {
                    model: Duration::ZERO,
                    env: t0.elapsed(),
                },
            ))
        }
        Solver::Policy(p) => match strategy {
            Strategy::Greedy => {
                // greedy decoding consumes no randomness
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                policy_rollout_timed(p, inst, DecodeMode::Greedy, &mut rng)
            }
            Strategy::Sample { n_traj, seed } => sample_best(p, inst, n_traj, seed),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub solver: String,
    pub strategy: String,
    pub makespan: Time,
    pub gap_percent: Option<f64>,
    pub wall_time_s: f64,
    pub model_time_s: f64,
    pub env_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchError {
    pub name: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Sorted by instance name.
    pub rows: Vec<BenchRow>,
    pub errors: Vec<BenchError>,
}

impl BenchReport {
    pub fn mean_makespan(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        Some(self.rows.iter().map(|r| r.makespan as f64).sum::<f64>() / self.rows.len() as f64)
    }

    /// Mean of per-instance gaps over rows that have one.
    pub fn mean_gap(&self) -> Option<f64> {
        let gaps: Vec<f64> = self.rows.iter().filter_map(|r| r.gap_percent).collect();
        if gaps.is_empty() {
            None
        } else {
            Some(gaps.iter().sum::<f64>() / gaps.len() as f64)
        }
    }

    pub fn total_time_s(&self) -> f64 {
        self.rows.iter().map(|r| r.wall_time_s).sum()
    }

    /// CSV with a header row. Timing columns are omitted when
    /// `with_times` is false, which makes the output reproducible.
    pub fn to_csv(&self, with_times: bool) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["name", "solver", "strategy", "makespan", "gap_percent"];
        if with_times {
            header.extend(["wall_time_s", "model_time_s", "env_time_s"]);
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.name.clone(),
                r.solver.clone(),
                r.strategy.clone(),
                r.makespan.to_string(),
                r.gap_percent.map(|g| format!("{g:.4}")).unwrap_or_default(),
            ];
            if with_times {
                rec.extend([r.wall_time_s, r.model_time_s, r.env_time_s].map(|t| format!("{t:.6}")));
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Aligned plain-text table followed by suite aggregates and errors.
    pub fn to_table(&self) -> String {
        let header = ["instance", "solver", "strategy", "makespan", "gap %", "time s"];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    r.solver.clone(),
                    r.strategy.clone(),
                    r.makespan.to_string(),
                    r.gap_percent.map(|g| format!("{g:.2}")).unwrap_or_else(|| "-".into()),
                    format!("{:.3}", r.wall_time_s),
                ]
            })
            .collect();
        let mut width = header.map(str::len);
        for row in &body {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[&str]| {
            for (i, c) in cells.iter().enumerate() {
                if i > 0 {
                    out.push_str("  ");
                }
                if i < 3 {
                    let _ = write!(out, "{c:<w$}", w = width[i]);
                } else {
                    let _ = write!(out, "{c:>w$}", w = width[i]);
                }
            }
            out.push('\n');
        };
        line(&mut out, &header);
        let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
        for row in &body {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        let _ = writeln!(
            out,
            "\ninstances: {}  mean makespan: {}  mean gap %: {}  total time s: {:.3}",
            self.rows.len(),
            self.mean_makespan().map_or("-".into(), |m| format!("{m:.2}")),
            self.mean_gap().map_or("-".into(), |g| format!("{g:.2}")),
            self.total_time_s()
        );
        for e in &self.errors {
            let _ = writeln!(out, "error: {}: {}", e.name, e.message);
        }
        out
    }
}

/// Read `name,makespan` rows. A header line is allowed.
pub fn load_best_known(path: &Path) -> Result<HashMap<String, Time>> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = HashMap::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let (Some(name), Some(value)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected `name,makespan`".into(),
            });
        };
        match value.parse::<Time>() {
            Ok(v) => {
                out.insert(name.to_string(), v);
            }
            Err(_) if i == 0 => {}
            Err(_) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("makespan `{value}` is not an integer"),
                })
            }
        }
    }
    Ok(out)
}

fn is_instance_file(path: &Path) -> bool {
    path.is_file()
        && matches!(
            path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            None | Some("fjs" | "fjsp" | "txt")
        )
}

fn solve_file(
    path: &Path,
    solver: &Solver,
    strategy: Strategy,
) -> Result<(Schedule, RolloutTiming, Duration)> {
    let text = fs::read_to_string(path)?;
    let inst = Arc::new(parse_instance(&text)?);
    let t0 = Instant::now();
    let (sched, timing) = solve(solver, strategy, inst.clone())?;
    let wall = t0.elapsed();
    let violations = validate_schedule(&inst, &sched);
    if !violations.is_empty() {
        return Err(Error::Contract(format!("infeasible schedule: {violations:?}")));
    }
    Ok((sched, timing, wall))
}

/// Solve every instance file in `dir` (extensions `fjs`, `fjsp`, `txt` or
/// none). Files that fail to read, parse or solve are listed in
/// `errors` and the suite continues.
pub fn run_benchmark(
    dir: &Path,
    solver: &Solver,
    strategy: Strategy,
    best_known: Option<&HashMap<String, Time>>,
) -> Result<BenchReport> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| is_instance_file(p));
    paths.sort();
    let strategy_name = match solver {
        Solver::Rule(_) => Strategy::Greedy.name(),
        Solver::Policy(_) => strategy.name(),
    };
    let mut report = BenchReport::default();
    for path in paths {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match solve_file(&path, solver, strategy) {
            Ok((sched, timing, wall)) => {
                let gap_percent = match best_known.and_then(|b| b.get(&name)) {
                    Some(&bk) => Some(gap(sched.makespan as f64, bk as f64)?),
                    None => None,
                };
                report.rows.push(BenchRow {
                    name,
                    solver: solver.name(),
                    strategy: strategy_name.to_string(),
                    makespan: sched.makespan,
                    gap_percent,
                    wall_time_s: wall.as_secs_f64(),
                    model_time_s: timing.model.as_secs_f64(),
                    env_time_s: timing.env.as_secs_f64(),
                });
            }
            Err(e) => report.errors.push(BenchError {
                name,
                message: e.to_string(),
            }),
        }
    }
    report.rows.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(report)
}

const LANE: f64 = 28.0;
const LEFT: f64 = 48.0;
const TOP: f64 = 40.0;
const CHART_WIDTH: f64 = 960.0;

/// Gantt chart as SVG 1.1: one lane per machine, one rectangle per
/// operation coloured by job.
pub fn gantt_svg(sched: &Schedule, inst: &FjspInstance) -> String {
    let span = sched.makespan.max(1) as f64;
    let sx = CHART_WIDTH / span;
    let m = inst.n_machines();
    let width = LEFT + CHART_WIDTH + 16.0;
    let height = TOP + LANE * m as f64 + 32.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="20" font-family="sans-serif" font-size="14">Makespan: {}</text>"#,
        sched.makespan
    );
    for k in 0..m {
        let y = TOP + LANE * k as f64;
        let _ = writeln!(
            s,
            r##"<rect class="lane" x="{LEFT}" y="{y:.3}" width="{CHART_WIDTH:.3}" height="{LANE:.3}" fill="none" stroke="#cccccc"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.3}" font-family="sans-serif" font-size="11">M{}</text>"#,
            y + LANE * 0.65,
            k + 1
        );
    }
    let n_jobs = inst.n_jobs().max(1);
    for o in &sched.ops {
        let hue = (o.job as f64 * 360.0 / n_jobs as f64 + o.job as f64 * 137.5) % 360.0;
        let x = LEFT + o.start as f64 * sx;
        let w = (o.end - o.start) as f64 * sx;
        let y = TOP + LANE * o.machine as f64 + 3.0;
        let _ = writeln!(
            s,
            r#"<rect class="op" x="{x:.3}" y="{y:.3}" width="{w:.3}" height="{:.3}" fill="hsl({hue:.0},65%,60%)" stroke="black" stroke-width="0.5"><title>J{} O{} M{} [{}, {})</title></rect>"#,
            LANE - 6.0,
            o.job + 1,
            o.op + 1,
            o.machine + 1,
            o.start,
            o.end
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{:.3}" font-family="sans-serif" font-size="10">0</text>"#,
        height - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
        LEFT + CHART_WIDTH,
        height - 10.0,
        sched.makespan
    );
    s.push_str("</svg>\n");
    s
}
