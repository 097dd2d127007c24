use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mcafjsp::bench::{gantt_svg, load_best_known, run_benchmark, solve, Solver, Strategy};
use mcafjsp::env::{validate_schedule, Schedule};
use mcafjsp::instance::{generate_instance, parse_instance, write_instance, GenSpec};
use mcafjsp::pdr::Rule;
use mcafjsp::policy::{DecoderKind, EncoderKind, Policy, PolicyConfig};
use mcafjsp::ppo::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "mcafjsp", version, about = "Flexible job-shop scheduling toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate random instance files
    Gen(GenArgs),
    /// Solve one instance and emit the schedule as JSON
    Solve(SolveArgs),
    /// Train a policy with PPO
    Train(TrainArgs),
    /// Solve every instance in a directory and report makespans and gaps
    Bench(BenchArgs),
    /// Check a schedule against an instance
    Validate(ValidateArgs),
}

#[derive(Args, Clone)]
struct SizeArgs {
    #[arg(long, default_value_t = 10)]
    jobs: usize,
    #[arg(long, default_value_t = 5)]
    machines: usize,
    /// Minimum operations per job (default: ceil(0.8 * machines))
    #[arg(long)]
    ops_min: Option<usize>,
    /// Maximum operations per job (default: ceil(1.2 * machines))
    #[arg(long)]
    ops_max: Option<usize>,
    #[arg(long, default_value_t = 1)]
    flex_min: usize,
    /// Maximum eligible machines per operation (default: machines)
    #[arg(long)]
    flex_max: Option<usize>,
    #[arg(long, default_value_t = 1)]
    time_min: i64,
    #[arg(long, default_value_t = 20)]
    time_max: i64,
}

impl SizeArgs {
    fn spec(&self, seed: u64) -> GenSpec {
        let base = GenSpec::new(self.jobs, self.machines, seed);
        GenSpec {
            ops_per_job: self.ops_min.unwrap_or(*base.ops_per_job.start())
                ..=self.ops_max.unwrap_or(*base.ops_per_job.end()),
            flex: self.flex_min..=self.flex_max.unwrap_or(*base.flex.end()),
            proc_time: self.time_min..=self.time_max,
            ..base
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    size: SizeArgs,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value = "inst")]
    prefix: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Sample,
}

#[derive(Args)]
struct SolverArgs {
    /// Dispatching rule: fifo, mor, spt or mwkr
    #[arg(long, conflicts_with = "checkpoint")]
    rule: Option<Rule>,
    /// Trained policy checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "greedy")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 100)]
    n_traj: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SolverArgs {
    fn solver(&self) -> Result<Solver> {
        match (&self.rule, &self.checkpoint) {
            (Some(r), None) => Ok(Solver::Rule(*r)),
            (None, Some(p)) => Ok(Solver::Policy(Arc::new(
                Policy::load(p).with_context(|| format!("loading {}", p.display()))?,
            ))),
            _ => bail!("give exactly one of --rule or --checkpoint"),
        }
    }

    fn strategy(&self) -> Strategy {
        match self.strategy {
            StrategyArg::Greedy => Strategy::Greedy,
            StrategyArg::Sample => Strategy::Sample {
                n_traj: self.n_traj,
                seed: self.seed,
            },
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    /// Instance file
    instance: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write the schedule here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a Gantt chart
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Dme,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    Ca,
    None,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    size: SizeArgs,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 20)]
    envs: usize,
    #[arg(long, default_value_t = 20)]
    resample_every: usize,
    #[arg(long, default_value_t = 10)]
    validate_every: usize,
    #[arg(long, default_value_t = 100)]
    val_size: usize,
    /// Seed of the first validation instance
    #[arg(long, default_value_t = 1_000_000)]
    val_seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr_final: f64,
    #[arg(long, default_value_t = 0.2)]
    clip: f64,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    value_coef: f64,
    #[arg(long, default_value_t = 0.01)]
    entropy_coef: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.98)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    max_grad_norm: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    mamba_layers: usize,
    #[arg(long, default_value_t = 16)]
    state_size: usize,
    #[arg(long, value_enum, default_value = "dme")]
    encoder: EncoderArg,
    #[arg(long, value_enum, default_value = "ca")]
    decoder: DecoderArg,
    /// Best checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON lines); stdout when omitted
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    dir: PathBuf,
    /// CSV of `name,makespan` best-known values
    #[arg(long)]
    best_known: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write the report as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Leave timing columns out of the CSV
    #[arg(long)]
    no_times: bool,
}

#[derive(Args)]
struct ValidateArgs {
    instance: PathBuf,
    schedule: PathBuf,
}

fn read_instance(path: &Path) -> Result<mcafjsp::instance::FjspInstance> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_instance(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    for i in 0..a.count {
        let inst = generate_instance(&a.size.spec(a.seed + i as u64))?;
        let path = a.out_dir.join(format!("{}_{i:04}.fjs", a.prefix));
        fs::write(&path, write_instance(&inst))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> Result<()> {
    let inst = Arc::new(read_instance(&a.instance)?);
    let (sched, _) = solve(&a.solver.solver()?, a.solver.strategy(), inst.clone())?;
    let json = sched.to_json();
    match &a.out {
        Some(p) => fs::write(p, json + "\n")?,
        None => writeln!(io::stdout(), "{json}")?,
    }
    if let Some(p) = &a.svg {
        fs::write(p, gantt_svg(&sched, &inst))?;
    }
    eprintln!("makespan {}", sched.makespan);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        iterations: a.iterations,
        envs_per_iter: a.envs,
        resample_every: a.resample_every,
        validate_every: a.validate_every,
        val_size: a.val_size,
        lr: a.lr,
        lr_final: a.lr_final,
        clip: a.clip,
        epochs: a.epochs,
        value_coef: a.value_coef,
        entropy_coef: a.entropy_coef,
        gamma: a.gamma,
        lambda: a.lambda,
        max_grad_norm: a.max_grad_norm,
        seed: a.seed,
    };
    let pcfg = PolicyConfig {
        d_model: a.d_model,
        heads: a.heads,
        mamba_layers: a.mamba_layers,
        state_size: a.state_size,
        encoder: match a.encoder {
            EncoderArg::Dme => EncoderKind::Dme,
            EncoderArg::None => EncoderKind::None,
        },
        decoder: match a.decoder {
            DecoderArg::Ca => DecoderKind::CrossAttention,
            DecoderArg::None => DecoderKind::None,
        },
        seed: a.seed,
        ..PolicyConfig::default()
    };
    let mut policy = Policy::new(pcfg)?;
    let train_spec = a.size.spec(a.seed);
    let val_spec = a.size.spec(a.val_seed);
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let s = train(&cfg, &mut policy, &train_spec, &val_spec, &a.out, &mut log)?;
    log.flush()?;
    eprintln!(
        "validation makespan {:.2} -> best {:.2}; checkpoint {}",
        s.initial_val_makespan,
        s.best_val_makespan,
        s.checkpoint.display()
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let bk = a.best_known.as_deref().map(load_best_known).transpose()?;
    let report = run_benchmark(&a.dir, &a.solver.solver()?, a.solver.strategy(), bk.as_ref())?;
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv(!a.no_times))?;
    }
    write!(io::stdout(), "{}", report.to_table())?;
    if report.rows.is_empty() {
        bail!("no instance in {} could be solved", a.dir.display());
    }
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<bool> {
    let inst = read_instance(&a.instance)?;
    let text = fs::read_to_string(&a.schedule)?;
    let sched = Schedule::from_json(&text).context("reading schedule JSON")?;
    let v = validate_schedule(&inst, &sched);
    writeln!(io::stdout(), "{}", serde_json::to_string_pretty(&v)?)?;
    Ok(v.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a).map(|_| true),
        Cmd::Solve(a) => cmd_solve(a).map(|_| true),
        Cmd::Train(a) => cmd_train(a).map(|_| true),
        Cmd::Bench(a) => cmd_bench(a).map(|_| true),
        Cmd::Validate(a) => cmd_validate(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
