//! Raw state features for operations, machines and eligible pairs.
//!
//! Time-valued features are divided by the instance's mean processing time.
//! Counts and ratios are left unscaled. Every ratio with a zero denominator
//! evaluates to 0.

use super::{OpStatus, PairAction, SimState};

pub const OP_FEATURES: usize = 10;
pub const MACHINE_FEATURES: usize = 8;
pub const PAIR_FEATURES: usize = 8;

/// Row-major feature matrices for one decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub n_ops: usize,
    pub n_machines: usize,
    /// `n_ops x OP_FEATURES`; rows of completed operations are all zero.
    pub ops: Vec<f64>,
    /// `n_machines x MACHINE_FEATURES`.
    pub machines: Vec<f64>,
    /// `pairs.len() x PAIR_FEATURES`.
    pub pair_features: Vec<f64>,
    /// False for completed operations.
    pub op_active: Vec<bool>,
    pub pairs: Vec<PairAction>,
    /// Global operation row of each pair.
    pub pair_op_rows: Vec<usize>,
}

impl FeatureBundle {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn op_row(&self, i: usize) -> &[f64] {
        &self.ops[i * OP_FEATURES..(i + 1) * OP_FEATURES]
    }

    pub fn machine_row(&self, k: usize) -> &[f64] {
        &self.machines[k * MACHINE_FEATURES..(k + 1) * MACHINE_FEATURES]
    }

    pub fn pair_row(&self, a: usize) -> &[f64] {
        &self.pair_features[a * PAIR_FEATURES..(a + 1) * PAIR_FEATURES]
    }

    /// Reorder the candidate list; `perm[new] = old`.
    pub fn permute_pairs(&self, perm: &[usize]) -> FeatureBundle {
        let mut out = self.clone();
        out.pairs = perm.iter().map(|&p| self.pairs[p]).collect();
        out.pair_op_rows = perm.iter().map(|&p| self.pair_op_rows[p]).collect();
        out.pair_features = perm
            .iter()
            .flat_map(|&p| self.pair_row(p).iter().copied())
            .collect();
        out
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Default, Clone, Copy)]
struct MachineAgg {
    unsched_count: usize,
    unsched_sum: f64,
    unsched_min: Option<i64>,
    unsched_max: i64,
    cand_count: usize,
    cand_max: i64,
}

pub(super) fn compute(state: &SimState) -> FeatureBundle {
    let inst = state.instance();
    let n_ops = inst.total_ops();
    let n_m = inst.n_machines();
    let scale = state.scale();
    let t = state.clock();

    // per-job remaining count and remaining workload (mean-time based)
    let mut job_remaining = vec![0usize; inst.n_jobs()];
    let mut job_workload = vec![0.0f64; inst.n_jobs()];
    let mut magg = vec![MachineAgg::default(); n_m];
    let mut max_unsched = 0i64;

    for (i, j, op) in inst.iter_ops() {
        let g = inst.op_index(i, j);
        match state.status[g] {
            OpStatus::Unscheduled | OpStatus::Ready => {
                job_remaining[i] += 1;
                job_workload[i] += op.mean_time();
                for &(k, p) in op.eligible() {
                    let a = &mut magg[k];
                    a.unsched_count += 1;
                    a.unsched_sum += p as f64;
                    a.unsched_min = Some(a.unsched_min.map_or(p, |m| m.min(p)));
                    a.unsched_max = a.unsched_max.max(p);
                    max_unsched = max_unsched.max(p);
                    if state.status[g] == OpStatus::Ready {
                        a.cand_count += 1;
                        a.cand_max = a.cand_max.max(p);
                    }
                }
            }
            _ => {}
        }
    }

    let mut ops = vec![0.0; n_ops * OP_FEATURES];
    let mut op_active = vec![true; n_ops];
    let m = n_m as f64;
    for (i, j, op) in inst.iter_ops() {
        let g = inst.op_index(i, j);
        let status = state.status[g];
        if status == OpStatus::Done {
            op_active[g] = false;
            continue;
        }
        let waiting = match (status, state.ready_time[g]) {
            (OpStatus::Ready, Some(r)) => (t - r) as f64,
            _ => 0.0,
        };
        let remaining = match (status, state.end[g]) {
            (OpStatus::Processing, Some(e)) => (e - t).max(0) as f64,
            _ => 0.0,
        };
        let row = &mut ops[g * OP_FEATURES..(g + 1) * OP_FEATURES];
        row[0] = if status == OpStatus::Processing { 1.0 } else { 0.0 };
        row[1] = op.min_time() as f64 / scale;
        row[2] = op.mean_time() / scale;
        row[3] = (op.max_time() - op.min_time()) as f64 / scale;
        row[4] = op.flexibility() as f64 / m;
        row[5] = state.lower_bound[g] as f64 / scale;
        row[6] = job_remaining[i] as f64;
        row[7] = job_workload[i] / scale;
        row[8] = waiting / scale;
        row[9] = remaining / scale;
    }

    let mut machines = vec![0.0; n_m * MACHINE_FEATURES];
    for k in 0..n_m {
        let a = &magg[k];
        let free = state.machine_free[k];
        let row = &mut machines[k * MACHINE_FEATURES..(k + 1) * MACHINE_FEATURES];
        row[0] = if free > t { 1.0 } else { 0.0 };
        row[1] = a.unsched_min.unwrap_or(0) as f64 / scale;
        row[2] = ratio(a.unsched_sum, a.unsched_count as f64) / scale;
        row[3] = a.unsched_count as f64;
        row[4] = a.cand_count as f64;
        row[5] = free as f64 / scale;
        row[6] = (t - free).max(0) as f64 / scale;
        row[7] = (free - t).max(0) as f64 / scale;
    }

    let pairs = state.eligible_actions().to_vec();
    let max_pair = pairs
        .iter()
        .map(|&p| state.pair_time(p))
        .max()
        .unwrap_or(0) as f64;
    let mut pair_features = vec![0.0; pairs.len() * PAIR_FEATURES];
    let mut pair_op_rows = Vec::with_capacity(pairs.len());
    for (a, &pa) in pairs.iter().enumerate() {
        let g = inst.op_index(pa.job, pa.op);
        pair_op_rows.push(g);
        let op = inst.operation(pa.job, pa.op);
        let p = state.pair_time(pa) as f64;
        let agg = &magg[pa.machine];
        let op_wait = state.ready_time[g].map_or(0, |r| t - r) as f64;
        let m_wait = (t - state.machine_free[pa.machine]).max(0) as f64;
        let row = &mut pair_features[a * PAIR_FEATURES..(a + 1) * PAIR_FEATURES];
        row[0] = p / scale;
        row[1] = ratio(p, op.max_time() as f64);
        row[2] = ratio(p, agg.cand_max as f64);
        row[3] = ratio(p, max_unsched as f64);
        row[4] = ratio(p, agg.unsched_max as f64);
        row[5] = ratio(p, max_pair);
        row[6] = ratio(p, job_workload[pa.job]);
        row[7] = (op_wait + m_wait) / scale;
    }

    FeatureBundle {
        n_ops,
        n_machines: n_m,
        ops,
        machines,
        pair_features,
        op_active,
        pairs,
        pair_op_rows,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::instance::parse_instance;

    #[test]
    fn tiny_instance_rows() {
        let s = SimState::reset(Arc::new(parse_instance("1 1\n1 1 1 5\n").unwrap()));
        let f = s.features();
        assert_eq!(f.op_row(0), &[0., 1., 1., 0., 1., 1., 1., 1., 0., 0.]);
        assert_eq!(f.machine_row(0), &[0., 1., 1., 1., 1., 0., 0., 0.]);
        assert_eq!(f.pair_row(0), &[1., 1., 1., 1., 1., 1., 1., 0.]);
        assert_eq!(f.op_active, vec![true]);
    }

    #[test]
    fn done_rows_are_zero_and_waiting_accrues() {
        // job0: op on m0 (3) then op on m1 (2); job1: op on m0 (4)
        let text = "2 2\n2 1 1 3 1 2 2\n1 1 1 4\n";
        let mut s = SimState::reset(Arc::new(parse_instance(text).unwrap()));
        s.step(PairAction {
            job: 0,
            op: 0,
            machine: 0,
        })
        .unwrap();
        // no idle machine can take a ready op until t=3
        assert_eq!(s.clock(), 3);
        let f = s.features();
        let scale = s.scale();
        assert!(f.op_row(0).iter().all(|&x| x == 0.0));
        assert!(!f.op_active[0]);
        // job1 op0 ready since t=0
        assert!((f.op_row(2)[8] - 3.0 / scale).abs() < 1e-12);
        // job0 op1 became ready at t=3, so no waiting yet
        assert_eq!(f.op_row(1)[8], 0.0);
        // machine 1 idle since t=0
        assert!((f.machine_row(1)[6] - 3.0 / scale).abs() < 1e-12);
        assert_eq!(f.n_pairs(), 2);
    }

    #[test]
    fn processing_op_row() {
        let text = "2 2\n1 1 1 6\n1 1 2 2\n";
        let mut s = SimState::reset(Arc::new(parse_instance(text).unwrap()));
        s.step(PairAction {
            job: 0,
            op: 0,
            machine: 0,
        })
        .unwrap();
        assert_eq!(s.clock(), 0);
        let f = s.features();
        let scale = s.scale();
        assert_eq!(f.op_row(0)[0], 1.0);
        assert!((f.op_row(0)[9] - 6.0 / scale).abs() < 1e-12);
        assert_eq!(f.machine_row(0)[0], 1.0);
        assert!((f.machine_row(0)[7] - 6.0 / scale).abs() < 1e-12);
        // the running op is no longer unscheduled
        assert_eq!(f.machine_row(0)[3], 0.0);
        assert_eq!(f.machine_row(0)[1], 0.0);
    }
}
