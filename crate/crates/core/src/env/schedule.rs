use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::instance::{FjspInstance, Time};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledOp {
    pub job: usize,
    pub op: usize,
    pub machine: usize,
    pub start: Time,
    pub end: Time,
}

/// A complete assignment. Serialized as
/// `{"makespan": int, "ops": [{"job","op","machine","start","end"}, ...]}`
/// with `ops` sorted by `(machine, start)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub makespan: Time,
    pub ops: Vec<ScheduledOp>,
}

impl Schedule {
    /// Build from entries; the makespan is the latest end.
    pub fn new(mut ops: Vec<ScheduledOp>) -> Self {
        ops.sort_by_key(|o| (o.machine, o.start, o.job, o.op));
        let makespan = ops.iter().map(|o| o.end).max().unwrap_or(0);
        Self { makespan, ops }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    UnknownOperation { job: usize, op: usize },
    Missing { job: usize, op: usize },
    Duplicate { job: usize, op: usize },
    Ineligible { job: usize, op: usize, machine: usize },
    Duration { job: usize, op: usize, expected: Time, actual: Time },
    NegativeStart { job: usize, op: usize },
    Precedence { job: usize, op: usize },
    Overlap { machine: usize, first: (usize, usize), second: (usize, usize) },
    Makespan { reported: Time, actual: Time },
}

/// Check coverage, eligibility, durations, precedence, machine capacity and
/// the reported makespan. An empty result means the schedule is feasible.
pub fn validate_schedule(inst: &FjspInstance, sched: &Schedule) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: HashMap<(usize, usize), ScheduledOp> = HashMap::new();

    for e in &sched.ops {
        let known = e.job < inst.n_jobs() && e.op < inst.jobs()[e.job].ops.len();
        if !known {
            out.push(Violation::UnknownOperation { job: e.job, op: e.op });
            continue;
        }
        if seen.insert((e.job, e.op), *e).is_some() {
            out.push(Violation::Duplicate { job: e.job, op: e.op });
        }
        if e.start < 0 {
            out.push(Violation::NegativeStart { job: e.job, op: e.op });
        }
        match inst.operation(e.job, e.op).time_on(e.machine) {
            None => out.push(Violation::Ineligible {
                job: e.job,
                op: e.op,
                machine: e.machine,
            }),
            Some(p) if e.end - e.start != p => out.push(Violation::Duration {
                job: e.job,
                op: e.op,
                expected: p,
                actual: e.end - e.start,
            }),
            Some(_) => {}
        }
    }

    for (i, job) in inst.jobs().iter().enumerate() {
        for j in 0..job.ops.len() {
            if !seen.contains_key(&(i, j)) {
                out.push(Violation::Missing { job: i, op: j });
            }
            if j > 0 {
                if let (Some(prev), Some(cur)) = (seen.get(&(i, j - 1)), seen.get(&(i, j))) {
                    if cur.start < prev.end {
                        out.push(Violation::Precedence { job: i, op: j });
                    }
                }
            }
        }
    }

    let mut by_machine: Vec<Vec<&ScheduledOp>> = vec![Vec::new(); inst.n_machines()];
    for e in &sched.ops {
        if e.machine < inst.n_machines() {
            by_machine[e.machine].push(e);
        }
    }
    for (k, lane) in by_machine.iter_mut().enumerate() {
        lane.sort_by_key(|e| (e.start, e.end));
        for w in lane.windows(2) {
            if w[1].start < w[0].end {
                out.push(Violation::Overlap {
                    machine: k,
                    first: (w[0].job, w[0].op),
                    second: (w[1].job, w[1].op),
                });
            }
        }
    }

    let actual = sched.ops.iter().map(|e| e.end).max().unwrap_or(0);
    if actual != sched.makespan {
        out.push(Violation::Makespan {
            reported: sched.makespan,
            actual,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::parse_instance;

    fn entry(job: usize, op: usize, machine: usize, start: Time, end: Time) -> ScheduledOp {
        ScheduledOp {
            job,
            op,
            machine,
            start,
            end,
        }
    }

    #[test]
    fn valid_tiny_schedule() {
        let inst = parse_instance("1 1\n1 1 1 5\n").unwrap();
        let s = Schedule::new(vec![entry(0, 0, 0, 0, 5)]);
        assert!(validate_schedule(&inst, &s).is_empty());
    }

    #[test]
    fn short_duration_flagged() {
        let inst = parse_instance("1 1\n1 1 1 5\n").unwrap();
        let s = Schedule::new(vec![entry(0, 0, 0, 0, 4)]);
        assert_eq!(
            validate_schedule(&inst, &s),
            vec![Violation::Duration {
                job: 0,
                op: 0,
                expected: 5,
                actual: 4
            }]
        );
    }

    #[test]
    fn overlap_flagged() {
        let inst = parse_instance("2 1\n1 1 1 3\n1 1 1 4\n").unwrap();
        let s = Schedule::new(vec![entry(0, 0, 0, 0, 3), entry(1, 0, 0, 2, 6)]);
        assert_eq!(
            validate_schedule(&inst, &s),
            vec![Violation::Overlap {
                machine: 0,
                first: (0, 0),
                second: (1, 0)
            }]
        );
    }

    #[test]
    fn coverage_precedence_and_eligibility() {
        let inst = parse_instance("1 2\n2 1 1 3 1 2 2\n").unwrap();
        let s = Schedule::new(vec![entry(0, 0, 0, 0, 3), entry(0, 1, 1, 2, 4)]);
        assert_eq!(
            validate_schedule(&inst, &s),
            vec![Violation::Precedence { job: 0, op: 1 }]
        );
        let s = Schedule::new(vec![entry(0, 0, 1, 0, 3)]);
        let v = validate_schedule(&inst, &s);
        assert!(v.contains(&Violation::Ineligible {
            job: 0,
            op: 0,
            machine: 1
        }));
        assert!(v.contains(&Violation::Missing { job: 0, op: 1 }));
    }

    #[test]
    fn json_shape() {
        let s = Schedule::new(vec![entry(1, 0, 1, 0, 2), entry(0, 0, 0, 3, 5), entry(2, 0, 0, 0, 3)]);
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(v["makespan"], 5);
        let machines: Vec<u64> = v["ops"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| o["machine"].as_u64().unwrap())
            .collect();
        assert_eq!(machines, vec![0, 0, 1]);
        assert_eq!(v["ops"][0]["job"], 2);
        assert_eq!(Schedule::from_json(&s.to_json()).unwrap(), s);
    }
}
