//! Priority dispatching rules.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::env::{rollout, PairAction, Schedule, SimState};
use crate::error::{Error, Result};
use crate::instance::FjspInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    /// Earliest ready operation, on the earliest-free eligible machine.
    Fifo,
    /// Most remaining successor operations in the job.
    Mor,
    /// Shortest processing time pair.
    Spt,
    /// Most remaining work (mean processing times, candidate included).
    Mwkr,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Fifo, Rule::Mor, Rule::Spt, Rule::Mwkr];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Fifo => "FIFO",
            Rule::Mor => "MOR",
            Rule::Spt => "SPT",
            Rule::Mwkr => "MWKR",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fifo" => Ok(Rule::Fifo),
            "mor" | "mopnr" => Ok(Rule::Mor),
            "spt" => Ok(Rule::Spt),
            "mwkr" => Ok(Rule::Mwkr),
            other => Err(Error::Contract(format!("unknown rule `{other}`"))),
        }
    }
}

/// Pick the first element of `items` maximizing `key` (ties keep the earlier one).
fn first_max_by<T: Copy, K: PartialOrd>(items: &[T], key: impl Fn(T) -> K) -> Option<T> {
    let mut best: Option<(T, K)> = None;
    for &it in items {
        let k = key(it);
        match &best {
            Some((_, bk)) if !(k > *bk) => {}
            _ => best = Some((it, k)),
        }
    }
    best.map(|(t, _)| t)
}

/// Among the eligible machines of the chosen operation, take the one with the
/// shortest processing time, then the lowest index.
fn fastest_machine(state: &SimState, pairs: &[PairAction], job: usize, op: usize) -> PairAction {
    let same: Vec<PairAction> = pairs
        .iter()
        .copied()
        .filter(|p| p.job == job && p.op == op)
        .collect();
    first_max_by(&same, |p| -state.pair_time(p)).expect("operation has an eligible pair")
}

fn job_workload(state: &SimState, job: usize) -> f64 {
    let ops = &state.instance().jobs()[job].ops;
    let from = ops.len() - state.remaining_ops(job);
    ops[from..].iter().map(|o| o.mean_time()).sum()
}

pub fn pdr_select(rule: Rule, state: &SimState) -> Result<PairAction> {
    let pairs = state.eligible_actions();
    if pairs.is_empty() {
        return Err(Error::Contract("no eligible pair to dispatch".into()));
    }
    let pick = match rule {
        Rule::Fifo => {
            let op = first_max_by(pairs, |p| -state.ready_time(p.job, p.op).unwrap_or(0))
                .expect("non-empty");
            let same: Vec<PairAction> = pairs
                .iter()
                .copied()
                .filter(|p| p.job == op.job && p.op == op.op)
                .collect();
            first_max_by(&same, |p| -state.machine_free_time(p.machine)).expect("non-empty")
        }
        Rule::Mor => {
            let op = first_max_by(pairs, |p| state.remaining_ops(p.job) - 1).expect("non-empty");
            fastest_machine(state, pairs, op.job, op.op)
        }
        Rule::Spt => first_max_by(pairs, |p| -state.pair_time(p)).expect("non-empty"),
        Rule::Mwkr => {
            let op = first_max_by(pairs, |p| job_workload(state, p.job)).expect("non-empty");
            fastest_machine(state, pairs, op.job, op.op)
        }
    };
    Ok(pick)
}

pub fn run_pdr(inst: Arc<FjspInstance>, rule: Rule) -> Result<Schedule> {
    rollout(inst, |s| pdr_select(rule, s))
}
