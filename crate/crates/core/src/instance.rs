//! Problem representation for the flexible job shop.
//!
//! Machine indices are 0-based everywhere in the crate. The text format uses
//! 1-based machine ids; conversion happens only in [`parse_instance`] and
//! [`write_instance`].

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{parse_err, Error, Result};

/// Integer time unit used for processing times and the simulation clock.
pub type Time = i64;

/// A single operation: the machines it may run on and the time on each.
///
/// Entries are sorted by machine index and contain no duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operation {
    eligible: Vec<(usize, Time)>,
}

impl Operation {
    pub fn new(mut eligible: Vec<(usize, Time)>) -> Result<Self> {
        if eligible.is_empty() {
            return Err(Error::InvalidInstance(
                "operation has no eligible machine".into(),
            ));
        }
        eligible.sort_by_key(|&(m, _)| m);
        if eligible.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidInstance(
                "operation lists a machine twice".into(),
            ));
        }
        if let Some(&(m, p)) = eligible.iter().find(|&&(_, p)| p < 1) {
            return Err(Error::InvalidInstance(format!(
                "non-positive processing time {p} on machine {m}"
            )));
        }
        Ok(Self { eligible })
    }

    /// `(machine, processing_time)` pairs in machine order.
    pub fn eligible(&self) -> &[(usize, Time)] {
        &self.eligible
    }

    pub fn time_on(&self, machine: usize) -> Option<Time> {
        self.eligible
            .binary_search_by_key(&machine, |&(m, _)| m)
            .ok()
            .map(|i| self.eligible[i].1)
    }

    pub fn min_time(&self) -> Time {
        self.eligible.iter().map(|&(_, p)| p).min().unwrap_or(0)
    }

    pub fn max_time(&self) -> Time {
        self.eligible.iter().map(|&(_, p)| p).max().unwrap_or(0)
    }

    pub fn mean_time(&self) -> f64 {
        self.eligible.iter().map(|&(_, p)| p as f64).sum::<f64>() / self.eligible.len() as f64
    }

    pub fn flexibility(&self) -> usize {
        self.eligible.len()
    }
}

/// A job is a precedence chain of operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub ops: Vec<Operation>,
}

/// An immutable FJSP instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FjspInstance {
    n_machines: usize,
    jobs: Vec<Job>,
    /// Global index of the first operation of each job (job-major layout).
    offsets: Vec<usize>,
    total_ops: usize,
}

impl FjspInstance {
    pub fn new(n_machines: usize, jobs: Vec<Job>) -> Result<Self> {
        if n_machines == 0 {
            return Err(Error::InvalidInstance("no machines".into()));
        }
        if jobs.is_empty() {
            return Err(Error::InvalidInstance("no jobs".into()));
        }
        let mut offsets = Vec::with_capacity(jobs.len());
        let mut total = 0;
        for (i, job) in jobs.iter().enumerate() {
            if job.ops.is_empty() {
                return Err(Error::InvalidInstance(format!("job {i} has no operations")));
            }
            for op in &job.ops {
                if let Some(&(m, _)) = op.eligible().iter().find(|&&(m, _)| m >= n_machines) {
                    return Err(Error::InvalidInstance(format!(
                        "job {i} references machine {m} but there are {n_machines} machines"
                    )));
                }
            }
            offsets.push(total);
            total += job.ops.len();
        }
        Ok(Self {
            n_machines,
            jobs,
            offsets,
            total_ops: total,
        })
    }

    pub fn n_jobs(&self) -> usize {
        self.jobs.len()
    }

    pub fn n_machines(&self) -> usize {
        self.n_machines
    }

    pub fn jobs(&self) -> &[Job] {
        &self.jobs
    }

    pub fn total_ops(&self) -> usize {
        self.total_ops
    }

    /// Global (job-major) index of operation `op` of job `job`.
    pub fn op_index(&self, job: usize, op: usize) -> usize {
        self.offsets[job] + op
    }

    pub fn job_offset(&self, job: usize) -> usize {
        self.offsets[job]
    }

    pub fn operation(&self, job: usize, op: usize) -> &Operation {
        &self.jobs[job].ops[op]
    }

    /// Iterate `(job, op, &Operation)` in job-major order.
    pub fn iter_ops(&self) -> impl Iterator<Item = (usize, usize, &Operation)> {
        self.jobs
            .iter()
            .enumerate()
            .flat_map(|(i, job)| job.ops.iter().enumerate().map(move |(j, o)| (i, j, o)))
    }

    /// Mean processing time over every (operation, eligible machine) entry.
    pub fn mean_processing_time(&self) -> f64 {
        let (sum, n) = self
            .iter_ops()
            .flat_map(|(_, _, o)| o.eligible().iter())
            .fold((0.0, 0usize), |(s, n), &(_, p)| (s + p as f64, n + 1));
        sum / n as f64
    }

    pub fn mean_flexibility(&self) -> f64 {
        let n: usize = self.iter_ops().map(|(_, _, o)| o.flexibility()).sum();
        n as f64 / self.total_ops as f64
    }
}

/// Aggregates reported by [`instance_stats`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceStats {
    pub total_ops: usize,
    pub mean_flex: f64,
    pub min_proc_time: Time,
    pub max_proc_time: Time,
}

pub fn instance_stats(inst: &FjspInstance) -> InstanceStats {
    let times = || {
        inst.iter_ops()
            .flat_map(|(_, _, o)| o.eligible().iter().map(|&(_, p)| p))
    };
    InstanceStats {
        total_ops: inst.total_ops(),
        mean_flex: inst.mean_flexibility(),
        min_proc_time: times().min().unwrap_or(0),
        max_proc_time: times().max().unwrap_or(0),
    }
}

fn parse_int(tok: &str, line: usize, what: &str) -> Result<i64> {
    tok.parse::<i64>()
        .map_err(|_| parse_err(line, format!("expected integer {what}, found `{tok}`")))
}

/// Parse the standard whitespace-separated FJSP text format.
///
/// Line 1 holds `<n_jobs> <n_machines> [<avg_flex>]`; each following
/// non-blank line describes one job as `<n_ops>` followed, per operation, by
/// `<k>` and `k` pairs `<machine (1-based)> <time>`.
pub fn parse_instance(text: &str) -> Result<FjspInstance> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let htoks: Vec<&str> = header.split_whitespace().collect();
    if htoks.len() < 2 || htoks.len() > 3 {
        return Err(parse_err(
            hline,
            format!("header needs 2 or 3 fields, found {}", htoks.len()),
        ));
    }
    let n_jobs = parse_int(htoks[0], hline, "job count")?;
    let n_machines = parse_int(htoks[1], hline, "machine count")?;
    if n_jobs < 1 || n_machines < 1 {
        return Err(parse_err(hline, "job and machine counts must be positive"));
    }
    // average flexibility: validated as a number, otherwise ignored
    if let Some(t) = htoks.get(2) {
        t.parse::<f64>()
            .map_err(|_| parse_err(hline, format!("malformed average flexibility `{t}`")))?;
    }
    let (n_jobs, n_machines) = (n_jobs as usize, n_machines as usize);

    let mut jobs = Vec::with_capacity(n_jobs);
    let mut last_line = hline;
    for (lno, line) in lines {
        last_line = lno;
        if jobs.len() == n_jobs {
            return Err(parse_err(
                lno,
                format!("unexpected content after {n_jobs} job lines"),
            ));
        }
        jobs.push(parse_job_line(line, lno, n_machines)?);
    }
    if jobs.len() != n_jobs {
        return Err(parse_err(
            last_line,
            format!("header declares {n_jobs} jobs but found {}", jobs.len()),
        ));
    }
    FjspInstance::new(n_machines, jobs).map_err(|e| parse_err(hline, e.to_string()))
}

fn parse_job_line(line: &str, lno: usize, n_machines: usize) -> Result<Job> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let mut pos = 0;
    let mut next = |what: &str| -> Result<i64> {
        let tok = toks
            .get(pos)
            .ok_or_else(|| parse_err(lno, format!("line ended while reading {what}")))?;
        pos += 1;
        parse_int(tok, lno, what)
    };
    let n_ops = next("operation count")?;
    if n_ops < 1 {
        return Err(parse_err(lno, "job must have at least one operation"));
    }
    let mut ops = Vec::with_capacity(n_ops as usize);
    for _ in 0..n_ops {
        let k = next("eligible machine count")?;
        if k < 1 {
            return Err(parse_err(lno, "operation must have at least one machine"));
        }
        let mut eligible = Vec::with_capacity(k as usize);
        for _ in 0..k {
            let m = next("machine id")?;
            let p = next("processing time")?;
            if m < 1 || m as usize > n_machines {
                return Err(parse_err(
                    lno,
                    format!("machine id {m} outside 1..={n_machines}"),
                ));
            }
            if p < 1 {
                return Err(parse_err(lno, format!("non-positive processing time {p}")));
            }
            eligible.push(((m - 1) as usize, p));
        }
        ops.push(Operation::new(eligible).map_err(|e| parse_err(lno, e.to_string()))?);
    }
    if pos != toks.len() {
        return Err(parse_err(
            lno,
            format!(
                "token count mismatch: {} trailing token(s)",
                toks.len() - pos
            ),
        ));
    }
    Ok(Job { ops })
}

/// Serialize to the standard text format; the header's third field is the
/// recomputed mean flexibility with one decimal.
pub fn write_instance(inst: &FjspInstance) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {:.1}",
        inst.n_jobs(),
        inst.n_machines(),
        inst.mean_flexibility()
    );
    for job in inst.jobs() {
        let _ = write!(out, "{}", job.ops.len());
        for op in &job.ops {
            let _ = write!(out, " {}", op.flexibility());
            for &(m, p) in op.eligible() {
                let _ = write!(out, " {} {}", m + 1, p);
            }
        }
        out.push('\n');
    }
    out
}

/// Synthetic instance distribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSpec {
    pub n_jobs: usize,
    pub n_machines: usize,
    pub ops_per_job: RangeInclusive<usize>,
    pub flex: RangeInclusive<usize>,
    pub proc_time: RangeInclusive<Time>,
    pub seed: u64,
}

impl GenSpec {
    /// Defaults: ops per job in `[ceil(0.8 m), ceil(1.2 m)]`, flexibility in
    /// `[1, m]`, processing times in `[1, 20]`.
    pub fn new(n_jobs: usize, n_machines: usize, seed: u64) -> Self {
        let lo = (4 * n_machines).div_ceil(5).max(1);
        let hi = (6 * n_machines).div_ceil(5).max(lo);
        Self {
            n_jobs,
            n_machines,
            ops_per_job: lo..=hi,
            flex: 1..=n_machines.max(1),
            proc_time: 1..=20,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.n_jobs == 0 || self.n_machines == 0 {
            return bad("job and machine counts must be positive");
        }
        if self.ops_per_job.is_empty() || *self.ops_per_job.start() == 0 {
            return bad("ops_per_job must be a non-empty range starting at >= 1");
        }
        if self.flex.is_empty() || *self.flex.start() == 0 || *self.flex.end() > self.n_machines {
            return bad("flex must be a non-empty range within 1..=n_machines");
        }
        if self.proc_time.is_empty() || *self.proc_time.start() < 1 {
            return bad("proc_time must be a non-empty range of positive times");
        }
        Ok(())
    }
}

/// Draw one instance; a pure function of `spec`.
pub fn generate_instance(spec: &GenSpec) -> Result<FjspInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut jobs = Vec::with_capacity(spec.n_jobs);
    for _ in 0..spec.n_jobs {
        let n_ops = rng.gen_range(spec.ops_per_job.clone());
        let mut ops = Vec::with_capacity(n_ops);
        for _ in 0..n_ops {
            let k = rng.gen_range(spec.flex.clone());
            let machines = index::sample(&mut rng, spec.n_machines, k);
            let eligible = machines
                .iter()
                .map(|m| (m, rng.gen_range(spec.proc_time.clone())))
                .collect();
            ops.push(Operation::new(eligible)?);
        }
        jobs.push(Job { ops });
    }
    FjspInstance::new(spec.n_machines, jobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FjspInstance {
        FjspInstance::new(
            1,
            vec![Job {
                ops: vec![Operation::new(vec![(0, 5)]).unwrap()],
            }],
        )
        .unwrap()
    }

    #[test]
    fn parses_smallest_file() {
        let inst = parse_instance("1 1 1\n1 1 1 5\n").unwrap();
        assert_eq!(inst, tiny());
        assert_eq!(inst.operation(0, 0).time_on(0), Some(5));
    }

    #[test]
    fn parses_two_job_example() {
        let inst = parse_instance("2 2 1.5\n2 1 1 3 2 1 2 2 4\n1 2 1 6 2 7\n").unwrap();
        assert_eq!(inst.n_jobs(), 2);
        assert_eq!(inst.total_ops(), 3);
        assert_eq!(inst.operation(0, 0).eligible(), &[(0, 3)]);
        assert_eq!(inst.operation(0, 1).eligible(), &[(0, 2), (1, 4)]);
        assert_eq!(inst.operation(1, 0).eligible(), &[(0, 6), (1, 7)]);
    }

    #[test]
    fn rejects_trailing_token() {
        // job 0 declares op1 with two pairs, leaving one stray token
        let err = parse_instance("2 2 1.5\n2 1 1 3 2 1 1 2 2 4\n1 2 1 6 2 7\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("token count mismatch"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let cases = [
            ("x 1\n1 1 1 5\n", 1),
            ("1 1 1\n1 1 2 5\n", 2),
            ("1 1 1\n1 1 1 0\n", 2),
            ("1 1 1\n1 1 1\n", 2),
            ("2 1\n1 1 1 5\n", 2),
            ("1 1\n1 1 1 5\n1 1 1 5\n", 3),
            ("1 1 abc\n1 1 1 5\n", 1),
        ];
        for (text, line) in cases {
            match parse_instance(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn accepts_missing_flex_and_blank_lines() {
        let inst = parse_instance("1 1\n\n1 1 1 5\n\n\n").unwrap();
        assert_eq!(inst, tiny());
    }

    #[test]
    fn writes_smallest_file() {
        assert_eq!(write_instance(&tiny()), "1 1 1.0\n1 1 1 5\n");
    }

    #[test]
    fn degenerate_spec_generates_tiny() {
        let spec = GenSpec {
            n_jobs: 1,
            n_machines: 1,
            ops_per_job: 1..=1,
            flex: 1..=1,
            proc_time: 5..=5,
            seed: 0,
        };
        assert_eq!(generate_instance(&spec).unwrap(), tiny());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec {
            ops_per_job: 4..=6,
            flex: 1..=5,
            ..GenSpec::new(10, 5, 42)
        };
        assert_eq!(
            generate_instance(&spec).unwrap(),
            generate_instance(&spec).unwrap()
        );
        assert_ne!(
            generate_instance(&spec).unwrap(),
            generate_instance(&spec.with_seed(43)).unwrap()
        );
    }

    #[test]
    fn default_ranges() {
        let s = GenSpec::new(10, 5, 0);
        assert_eq!(s.ops_per_job, 4..=6);
        assert_eq!(s.flex, 1..=5);
        assert_eq!(s.proc_time, 1..=20);
        let s = GenSpec::new(6, 4, 0);
        assert_eq!(s.ops_per_job, 4..=5);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = GenSpec::new(3, 2, 0);
        s.flex = 1..=3;
        assert!(generate_instance(&s).is_err());
        let mut s = GenSpec::new(3, 2, 0);
        s.proc_time = 0..=3;
        assert!(generate_instance(&s).is_err());
    }

    #[test]
    fn stats() {
        let st = instance_stats(&tiny());
        assert_eq!(st.total_ops, 1);
        assert_eq!(st.mean_flex, 1.0);
        assert_eq!((st.min_proc_time, st.max_proc_time), (5, 5));
    }

    #[test]
    fn mean_processing_time_matches_uniform_mean() {
        // Monte-Carlo against the U(1,20) mean of 10.5
        let base = GenSpec::new(10, 5, 0);
        let (mut sum, mut n) = (0.0, 0usize);
        for seed in 0..1000 {
            let inst = generate_instance(&base.with_seed(seed)).unwrap();
            for (_, _, op) in inst.iter_ops() {
                for &(_, p) in op.eligible() {
                    sum += p as f64;
                    n += 1;
                }
            }
        }
        let mean = sum / n as f64;
        assert!((10.0..=11.0).contains(&mean), "mean {mean}");
    }
}
