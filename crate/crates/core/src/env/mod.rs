//! The scheduling MDP.
//!
//! A [`SimState`] is advanced by dispatching one eligible operation-machine
//! pair per step. Operations start exactly at the current clock; when no pair
//! is eligible the clock jumps to the next machine release. Rewards are the
//! decrease of the makespan estimate, so they telescope to
//! `C_max(s_0) - makespan` over an episode.

mod features;
mod schedule;

use std::sync::Arc;

pub use features::{FeatureBundle, MACHINE_FEATURES, OP_FEATURES, PAIR_FEATURES};
pub use schedule::{validate_schedule, Schedule, ScheduledOp, Violation};

use crate::error::{Error, Result};
use crate::instance::{FjspInstance, Time};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpStatus {
    /// Predecessor not finished yet.
    Unscheduled,
    /// Predecessor finished; waiting for dispatch.
    Ready,
    /// Dispatched and still running at the current clock.
    Processing,
    Done,
}

/// An operation-machine dispatch decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairAction {
    pub job: usize,
    pub op: usize,
    pub machine: usize,
}

#[derive(Debug, Clone)]
pub struct SimState {
    inst: Arc<FjspInstance>,
    clock: Time,
    status: Vec<OpStatus>,
    ready_time: Vec<Option<Time>>,
    start: Vec<Option<Time>>,
    end: Vec<Option<Time>>,
    assigned: Vec<Option<usize>>,
    machine_free: Vec<Time>,
    /// Index of the first undispatched operation per job.
    next_op: Vec<usize>,
    /// Lower bound of the completion time of every operation.
    lower_bound: Vec<Time>,
    eligible: Vec<PairAction>,
    step_count: usize,
    done_count: usize,
    scale: f64,
}

impl SimState {
    pub fn reset(inst: Arc<FjspInstance>) -> Self {
        let n = inst.total_ops();
        let mut status = vec![OpStatus::Unscheduled; n];
        let mut ready_time = vec![None; n];
        let mut lower_bound = vec![0; n];
        for (i, job) in inst.jobs().iter().enumerate() {
            let first = inst.op_index(i, 0);
            status[first] = OpStatus::Ready;
            ready_time[first] = Some(0);
            let mut acc = 0;
            for (j, op) in job.ops.iter().enumerate() {
                acc += op.min_time();
                lower_bound[first + j] = acc;
            }
        }
        let scale = inst.mean_processing_time();
        let mut state = Self {
            clock: 0,
            status,
            ready_time,
            start: vec![None; n],
            end: vec![None; n],
            assigned: vec![None; n],
            machine_free: vec![0; inst.n_machines()],
            next_op: vec![0; inst.n_jobs()],
            lower_bound,
            eligible: Vec::new(),
            step_count: 0,
            done_count: 0,
            scale,
            inst,
        };
        state.refresh_eligible();
        state
    }

    pub fn instance(&self) -> &FjspInstance {
        &self.inst
    }

    pub fn instance_arc(&self) -> &Arc<FjspInstance> {
        &self.inst
    }

    pub fn clock(&self) -> Time {
        self.clock
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Time unit used to normalise time-valued features and rewards.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn status(&self, job: usize, op: usize) -> OpStatus {
        self.status[self.inst.op_index(job, op)]
    }

    pub fn ready_time(&self, job: usize, op: usize) -> Option<Time> {
        self.ready_time[self.inst.op_index(job, op)]
    }

    pub fn machine_free_time(&self, machine: usize) -> Time {
        self.machine_free[machine]
    }

    /// All operations have been dispatched and completed.
    pub fn is_done(&self) -> bool {
        self.done_count == self.inst.total_ops()
    }

    /// Eligible pairs in job-major, then op, then machine order.
    pub fn eligible_actions(&self) -> &[PairAction] {
        &self.eligible
    }

    /// Remaining undispatched operations of `job`.
    pub fn remaining_ops(&self, job: usize) -> usize {
        self.inst.jobs()[job].ops.len() - self.next_op[job]
    }

    /// Lower bound of the completion time of `(job, op)`: the actual end for
    /// dispatched operations, otherwise the predecessor's bound plus the
    /// operation's minimum processing time.
    pub fn lower_bound_completion(&self, job: usize, op: usize) -> Time {
        self.lower_bound[self.inst.op_index(job, op)]
    }

    /// Makespan estimate used by the reward.
    pub fn makespan_estimate(&self) -> Time {
        let machines = self.machine_free.iter().copied().max().unwrap_or(0);
        let jobs = (0..self.inst.n_jobs())
            .map(|i| {
                let last = self.inst.op_index(i, self.inst.jobs()[i].ops.len() - 1);
                self.lower_bound[last]
            })
            .max()
            .unwrap_or(0);
        machines.max(jobs)
    }

    /// Dispatch `action`, advance the clock to the next decision point and
    /// return the integer reward `C_max(s_t) - C_max(s_{t+1})`.
    pub fn step(&mut self, action: PairAction) -> Result<Time> {
        if !self.eligible.contains(&action) {
            return Err(Error::IllegalAction(format!(
                "{action:?} is not eligible at t={}",
                self.clock
            )));
        }
        let before = self.makespan_estimate();
        let inst = Arc::clone(&self.inst);
        let g = inst.op_index(action.job, action.op);
        let p = inst
            .operation(action.job, action.op)
            .time_on(action.machine)
            .expect("eligible pair has a processing time");
        let end = self.clock + p;
        self.status[g] = OpStatus::Processing;
        self.start[g] = Some(self.clock);
        self.end[g] = Some(end);
        self.assigned[g] = Some(action.machine);
        self.machine_free[action.machine] = end;
        self.next_op[action.job] += 1;
        self.step_count += 1;

        self.lower_bound[g] = end;
        let job = &inst.jobs()[action.job];
        let mut acc = end;
        for j in action.op + 1..job.ops.len() {
            acc += job.ops[j].min_time();
            self.lower_bound[g + j - action.op] = acc;
        }

        self.refresh_eligible();
        self.advance();
        Ok(before - self.makespan_estimate())
    }

    /// Jump to successive machine releases until a pair becomes eligible or
    /// every operation has completed.
    fn advance(&mut self) {
        while self.eligible.is_empty() && !self.is_done() {
            let next = self
                .machine_free
                .iter()
                .copied()
                .filter(|&t| t > self.clock)
                .min()
                .expect("unfinished episode has a busy machine");
            self.clock = next;
            self.complete_finished();
            self.refresh_eligible();
        }
    }

    fn complete_finished(&mut self) {
        let inst = Arc::clone(&self.inst);
        for i in 0..inst.n_jobs() {
            let n = inst.jobs()[i].ops.len();
            let base = inst.op_index(i, 0);
            // only the most recently dispatched op of a job can be running
            let Some(j) = self.next_op[i].checked_sub(1) else {
                continue;
            };
            let g = base + j;
            if self.status[g] == OpStatus::Processing && self.end[g].is_some_and(|e| e <= self.clock)
            {
                self.status[g] = OpStatus::Done;
                self.done_count += 1;
                if j + 1 < n {
                    self.status[g + 1] = OpStatus::Ready;
                    self.ready_time[g + 1] = self.end[g];
                }
            }
        }
    }

    fn refresh_eligible(&mut self) {
        self.eligible.clear();
        for (i, job) in self.inst.jobs().iter().enumerate() {
            let j = self.next_op[i];
            if j >= job.ops.len() || self.status[self.inst.op_index(i, j)] != OpStatus::Ready {
                continue;
            }
            for &(k, _) in job.ops[j].eligible() {
                if self.machine_free[k] <= self.clock {
                    self.eligible.push(PairAction {
                        job: i,
                        op: j,
                        machine: k,
                    });
                }
            }
        }
    }

    /// Processing time of an eligible pair.
    pub fn pair_time(&self, pair: PairAction) -> Time {
        self.inst
            .operation(pair.job, pair.op)
            .time_on(pair.machine)
            .unwrap_or(0)
    }

    pub fn features(&self) -> FeatureBundle {
        features::compute(self)
    }

    pub fn to_schedule(&self) -> Result<Schedule> {
        if !self.is_done() {
            return Err(Error::Contract(format!(
                "episode unfinished: {} of {} operations done",
                self.done_count,
                self.inst.total_ops()
            )));
        }
        let ops = self
            .inst
            .iter_ops()
            .map(|(i, j, _)| {
                let g = self.inst.op_index(i, j);
                ScheduledOp {
                    job: i,
                    op: j,
                    machine: self.assigned[g].expect("done op is assigned"),
                    start: self.start[g].expect("done op has a start"),
                    end: self.end[g].expect("done op has an end"),
                }
            })
            .collect();
        Ok(Schedule::new(ops))
    }
}

/// Run one full episode, choosing each action with `choose`.
pub fn rollout<F>(inst: Arc<FjspInstance>, mut choose: F) -> Result<Schedule>
where
    F: FnMut(&SimState) -> Result<PairAction>,
{
    let mut state = SimState::reset(inst);
    while !state.is_done() {
        let a = choose(&state)?;
        state.step(a)?;
    }
    state.to_schedule()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate_instance, parse_instance, GenSpec};

    fn inst(text: &str) -> Arc<FjspInstance> {
        Arc::new(parse_instance(text).unwrap())
    }

    fn pair(job: usize, op: usize, machine: usize) -> PairAction {
        PairAction { job, op, machine }
    }

    #[test]
    fn tiny_episode() {
        let mut s = SimState::reset(inst("1 1\n1 1 1 5\n"));
        assert_eq!(s.eligible_actions(), &[pair(0, 0, 0)]);
        assert_eq!(s.makespan_estimate(), 5);
        let r = s.step(pair(0, 0, 0)).unwrap();
        assert_eq!(r, 0);
        assert!(s.is_done());
        assert!(s.eligible_actions().is_empty());
        assert_eq!(s.clock(), 5);
        let sched = s.to_schedule().unwrap();
        assert_eq!(sched.makespan, 5);
        assert_eq!(
            sched.ops,
            vec![ScheduledOp {
                job: 0,
                op: 0,
                machine: 0,
                start: 0,
                end: 5
            }]
        );
    }

    #[test]
    fn reset_is_pure() {
        let i = inst("2 2\n2 1 1 3 2 1 2 2 4\n1 2 1 6 2 7\n");
        let a = SimState::reset(i.clone());
        let b = SimState::reset(i);
        assert_eq!(a.eligible_actions(), b.eligible_actions());
        assert_eq!(a.features(), b.features());
    }

    #[test]
    fn initial_eligible_set_counts_first_op_flexibility() {
        // 3x3: first ops have flexibility 2, 3 and 1
        let i = inst("3 3\n2 2 1 4 2 5 1 3 2\n1 3 1 1 2 2 3 3\n2 1 2 7 1 1 1\n");
        let s = SimState::reset(i);
        assert_eq!(s.eligible_actions().len(), 2 + 3 + 1);
        assert_eq!(
            s.eligible_actions(),
            &[
                pair(0, 0, 0),
                pair(0, 0, 1),
                pair(1, 0, 0),
                pair(1, 0, 1),
                pair(1, 0, 2),
                pair(2, 0, 1)
            ]
        );
    }

    #[test]
    fn two_jobs_share_one_machine() {
        let i = inst("2 1\n1 1 1 3\n1 1 1 4\n");
        let mut s = SimState::reset(i.clone());
        assert_eq!(s.eligible_actions(), &[pair(0, 0, 0), pair(1, 0, 0)]);
        s.step(pair(0, 0, 0)).unwrap();
        assert_eq!(s.clock(), 3);
        assert_eq!(s.eligible_actions(), &[pair(1, 0, 0)]);
        s.step(pair(1, 0, 0)).unwrap();
        assert_eq!(s.to_schedule().unwrap().makespan, 7);

        let mut s = SimState::reset(i);
        s.step(pair(1, 0, 0)).unwrap();
        s.step(pair(0, 0, 0)).unwrap();
        assert_eq!(s.to_schedule().unwrap().makespan, 7);
    }

    #[test]
    fn lower_bounds_follow_the_chain() {
        let i = inst("1 2\n2 2 1 3 2 5 2 1 4 2 6\n");
        let mut s = SimState::reset(i);
        assert_eq!(s.lower_bound_completion(0, 0), 3);
        assert_eq!(s.lower_bound_completion(0, 1), 7);
        s.step(pair(0, 0, 1)).unwrap();
        assert_eq!(s.lower_bound_completion(0, 0), 5);
        assert_eq!(s.lower_bound_completion(0, 1), 9);
    }

    #[test]
    fn illegal_action_rejected() {
        let mut s = SimState::reset(inst("2 1\n2 1 1 3 1 1 2\n1 1 1 4\n"));
        assert!(matches!(s.step(pair(0, 1, 0)), Err(Error::IllegalAction(_))));
        s.step(pair(0, 0, 0)).unwrap();
        // machine busy until the clock moves
        assert!(s.step(pair(0, 0, 0)).is_err());
    }

    #[test]
    fn unfinished_episode_has_no_schedule() {
        let s = SimState::reset(inst("1 1\n1 1 1 5\n"));
        assert!(s.to_schedule().is_err());
    }

    #[test]
    fn episodes_take_total_ops_steps_and_telescope() {
        let spec = GenSpec::new(5, 3, 0);
        for seed in 0..50 {
            let i = Arc::new(generate_instance(&spec.with_seed(seed)).unwrap());
            let mut s = SimState::reset(i.clone());
            let c0 = s.makespan_estimate();
            let mut total = 0;
            let mut last_est = c0;
            let mut k = seed as usize;
            while !s.is_done() {
                let acts = s.eligible_actions();
                let a = acts[k % acts.len()];
                k = k.wrapping_mul(31).wrapping_add(7);
                total += s.step(a).unwrap();
                assert!(s.makespan_estimate() >= last_est);
                last_est = s.makespan_estimate();
            }
            assert_eq!(s.step_count(), i.total_ops());
            let sched = s.to_schedule().unwrap();
            assert_eq!(total, c0 - sched.makespan);
            assert!(validate_schedule(&i, &sched).is_empty());
        }
    }
}
