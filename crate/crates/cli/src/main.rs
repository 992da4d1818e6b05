use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flock_core::cost::CostVariant;
use flock_core::experiments::{self, ExperimentConfig, ExperimentKind, ExperimentReport};
use flock_core::instance_file::{read_instance, write_instance};
use flock_core::model::{social_cost, Instance, Outcome};
use flock_core::oracle::{brute_force_optimum_with_budget, poa_against, verify_eta_nash, DEFAULT_BUDGET};
use flock_core::protocol::{run, run_controlled, EstimateUpdate, Jitter, ProtocolConfig};
use flock_core::regularize::{
    check_lemma1_condition, poa_bound, required_lambda, theorem2_lambda, LemmaGrid, PoaBound, RegFn,
};
use flock_core::scenarios::{self, GenParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exit status when a run detected an invariant violation.
const VIOLATION_EXIT: u8 = 2;

#[derive(Parser)]
#[command(name = "flock", version, about = "Autonomous VM migration among federated clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rounds to equilibrium as the number of VMs grows.
    Convergence(ExperimentArgs),
    /// Price of Anarchy against the brute-force optimum.
    Poa(ExperimentArgs),
    /// Load-balancing preset: utilization spread at equilibrium.
    Balance(ExperimentArgs),
    /// Energy preset: idle clouds at equilibrium against the packing ideal.
    Energy(ExperimentArgs),
    /// Controlled variant under latency jitter.
    Dynamics(ExperimentArgs),
    /// Migration counts under the migration-cost variants.
    Cost(ExperimentArgs),
    /// Print the default config of an experiment kind.
    Config { kind: String },
    /// Run the protocol once and write its trace as CSV.
    Run(RunArgs),
    /// Generate an instance file.
    Gen(GenArgs),
    /// Exhaustive optimum, equilibrium cost and PoA for a set of instances.
    Oracle(OracleArgs),
    /// Price-of-Anarchy bound for a regularization shift and weight bracket.
    Bound(BoundArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config; defaults to the built-in preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed trial count per sweep point (disables CI stopping).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Regularization shift `a`.
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Directory for trials.csv and summary.csv.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Dump the instance of trial `POINT:TRIAL` to FILE (as `POINT:TRIAL=FILE`).
    #[arg(long, value_name = "POINT:TRIAL=FILE")]
    emit_instance: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Random,
    Balance,
    Energy,
}

#[derive(Args)]
struct GenOpts {
    #[arg(long, default_value_t = 5)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    edge_prob: f64,
    #[arg(long)]
    mean_degree: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "random")]
    preset: Preset,
}

impl GenOpts {
    fn params(&self) -> GenParams {
        GenParams {
            m: self.m,
            n: self.n,
            edge_prob: self.edge_prob,
            mean_degree: self.mean_degree,
            seed: self.seed,
            ..GenParams::default()
        }
    }

    fn instance(&self) -> Result<Instance> {
        self.instance_with_seed(self.seed)
    }

    fn instance_with_seed(&self, seed: u64) -> Result<Instance> {
        let p = GenParams { seed, ..self.params() };
        Ok(match self.preset {
            Preset::Random => scenarios::gen_random_instance(&p)?,
            Preset::Balance => scenarios::preset_load_balancing(&p)?,
            Preset::Energy => scenarios::preset_energy(&p)?,
        })
    }
}

#[derive(Args)]
struct RunArgs {
    /// Instance file; otherwise one is generated.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[command(flatten)]
    gen: GenOpts,
    #[arg(long, default_value_t = 0.9)]
    eta: f64,
    #[arg(long, default_value_t = 9.0)]
    a: f64,
    /// Seed of the placement and the rounds.
    #[arg(long, default_value_t = 0)]
    run_seed: u64,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long, default_value = "none")]
    cost: CostVariant,
    #[arg(long, default_value_t = 10.0)]
    cost_coeff: f64,
    /// Use the controlled variant.
    #[arg(long)]
    controlled: bool,
    /// Relative latency jitter band of the controlled variant.
    #[arg(long)]
    jitter: Option<f64>,
    /// Innovation estimate update instead of the literal one.
    #[arg(long)]
    innovation: bool,
    /// Trace CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the instance used.
    #[arg(long)]
    emit_instance: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    gen: GenOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    /// Instance files; otherwise `--count` instances are generated.
    #[arg(long = "instance")]
    instances: Vec<PathBuf>,
    #[command(flatten)]
    gen: GenOpts,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0.99)]
    eta: f64,
    #[arg(long, default_value_t = 9.0)]
    a: f64,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: u128,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, default_value_t = 9.0)]
    a: f64,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long)]
    w_min: f64,
    #[arg(long)]
    w_max: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Convergence(a) => experiment(ExperimentKind::Convergence, a),
        Command::Poa(a) => experiment(ExperimentKind::Poa, a),
        Command::Balance(a) => experiment(ExperimentKind::Balance, a),
        Command::Energy(a) => experiment(ExperimentKind::Energy, a),
        Command::Dynamics(a) => experiment(ExperimentKind::Dynamics, a),
        Command::Cost(a) => experiment(ExperimentKind::Cost, a),
        Command::Config { kind } => {
            let kind: ExperimentKind = kind.parse().map_err(anyhow::Error::msg)?;
            print!("{}", ExperimentConfig::preset(kind).to_toml_string());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(a) => run_once(a),
        Command::Gen(a) => {
            write_instance(&a.gen.instance()?, &a.out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle(a) => oracle(a),
        Command::Bound(a) => bound(a),
    }
}

fn experiment(kind: ExperimentKind, args: ExperimentArgs) -> Result<ExitCode> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::read(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::preset(kind),
    };
    if config.kind != kind {
        bail!("config describes a '{}' experiment, not '{kind}'", config.kind);
    }
    if let Some(s) = args.seed {
        config.master_seed = s;
    }
    if let Some(t) = args.trials {
        config.trials = Some(t);
    }
    if let Some(e) = args.eta {
        config.protocol.eta = e;
    }
    if let Some(a) = args.a {
        config.protocol.reg.a = a;
    }
    if let Some(m) = args.m {
        config.gen.m = m;
    }
    if let Some(n) = args.n {
        config.gen.n = n;
    }
    config.validate()?;

    if let Some(spec) = &args.emit_instance {
        let (point, trial, path) = parse_emit(spec)?;
        let setup = experiments::trial_setup(&config, point, trial)?;
        write_instance(&setup.instance, &path)?;
        log::info!("wrote instance of point {point} trial {trial} (seed {}) to {}", setup.seed, path.display());
    }

    let report = experiments::run_experiment(&config)?;
    report.write_dir(&args.out)?;
    print_summary(&report, &mut io::stdout().lock())?;
    for p in report.points.iter().filter(|p| p.budget_exhausted) {
        eprintln!(
            "warning: CI target not met at {} = {} after {} trials",
            kind,
            p.sweep_value,
            p.trials.len()
        );
    }
    let violations = report.violations();
    for v in &violations {
        eprintln!("violation: sweep value {} trial {}: {}", v.sweep_value, v.trial, v.message);
    }
    Ok(if violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(VIOLATION_EXIT)
    })
}

fn parse_emit(spec: &str) -> Result<(usize, usize, PathBuf)> {
    let (ids, path) = spec.split_once('=').context("expected POINT:TRIAL=FILE")?;
    let (point, trial) = ids.split_once(':').context("expected POINT:TRIAL=FILE")?;
    Ok((point.parse()?, trial.parse()?, PathBuf::from(path)))
}

fn print_summary(report: &ExperimentReport, out: &mut impl Write) -> io::Result<()> {
    let primary = report.kind.metrics()[0];
    writeln!(out, "{:>12} {:>7} {:>12} {:>12} {:>12} {:>12}", "sweep", "trials", primary, "ci", "min", "max")?;
    for p in &report.points {
        match p.summaries[0] {
            Some(s) => writeln!(
                out,
                "{:>12} {:>7} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                p.sweep_value, s.n, s.mean, s.ci_half_width, s.min, s.max
            )?,
            None => writeln!(out, "{:>12} {:>7}", p.sweep_value, p.trials.len())?,
        }
    }
    Ok(())
}

fn run_once(a: RunArgs) -> Result<ExitCode> {
    let inst = match &a.instance {
        Some(path) => read_instance(path)?,
        None => a.gen.instance()?,
    };
    if let Some(path) = &a.emit_instance {
        write_instance(&inst, path)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.run_seed);
    let initial = scenarios::initial_assignment(&inst, &mut rng)?;
    let mut config = ProtocolConfig::with_eta(a.eta);
    config.reg = RegFn::new(a.a)?;
    config.max_rounds = a.max_rounds;
    config.cost.variant = a.cost;
    config.cost.coeff = a.cost_coeff;
    config.jitter = a.jitter.map(|band| Jitter { band });
    if a.innovation {
        config.estimate_update = EstimateUpdate::Innovation;
    }
    let trace = if a.controlled {
        run_controlled(&inst, &initial, &config, &mut rng)?.trace
    } else {
        run(&inst, &initial, &config, &mut rng)?
    };
    let with_r = a.cost != CostVariant::None && !a.controlled;
    match &a.out {
        Some(path) => trace.write_csv(File::create(path)?, with_r)?,
        None => trace.write_csv(io::stdout().lock(), with_r)?,
    }
    eprintln!(
        "{} after {} rounds, {} migrations, social cost {} -> {}",
        trace.termination,
        trace.num_rounds(),
        trace.total_migrations(),
        trace.initial_cost,
        trace.final_cost
    );
    Ok(ExitCode::SUCCESS)
}

fn oracle(a: OracleArgs) -> Result<ExitCode> {
    let reg = RegFn::new(a.a)?;
    let mut instances: Vec<(String, Instance)> = Vec::new();
    for path in &a.instances {
        instances.push((path.display().to_string(), read_instance(path)?));
    }
    if instances.is_empty() {
        for k in 0..a.count {
            let seed = a.gen.seed + k as u64;
            instances.push((format!("seed-{seed}"), a.gen.instance_with_seed(seed)?));
        }
    }
    let out: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut violations = 0;
    let mut w = OracleWriter::new(out)?;
    for (id, inst) in &instances {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let initial = match scenarios::initial_assignment(inst, &mut rng) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("{id}: {e}");
                continue;
            }
        };
        let trace = run(inst, &initial, &ProtocolConfig { reg, ..ProtocolConfig::with_eta(a.eta) }, &mut rng)?;
        let opt = brute_force_optimum_with_budget(inst, &reg, a.budget)?;
        let poa = poa_against(inst, &trace.final_outcome, &reg, &opt)?;
        let nash = verify_eta_nash(inst, &trace.final_outcome, &reg, a.eta)?.holds;
        if poa < 1.0 - 1e-9 || (trace.converged() && !nash) {
            violations += 1;
            eprintln!("violation on {id}: PoA {poa}, eta-Nash {nash}");
        }
        w.row(id, opt.best_cost, &trace.final_outcome, inst, &reg, poa)?;
    }
    Ok(if violations == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(VIOLATION_EXIT)
    })
}

struct OracleWriter {
    out: Box<dyn Write>,
}

impl OracleWriter {
    fn new(mut out: Box<dyn Write>) -> Result<Self> {
        writeln!(out, "instance,optimum_cost,ne_cost,poa")?;
        Ok(Self { out })
    }

    fn row(&mut self, id: &str, opt: f64, ne: &Outcome, inst: &Instance, reg: &RegFn, poa: f64) -> Result<()> {
        let c = social_cost(inst, ne, reg)?;
        writeln!(self.out, "{id},{opt},{c},{poa}")?;
        Ok(())
    }
}

fn bound(a: BoundArgs) -> Result<ExitCode> {
    let reg = RegFn::new(a.a)?;
    let closed = theorem2_lambda(&reg, a.epsilon, a.w_min, a.w_max)?;
    let grid = LemmaGrid::bracket(a.w_min, a.w_max);
    let needed = required_lambda(&reg, a.epsilon, &grid);
    let lambda = closed.max(needed);
    let b = PoaBound::new(lambda, a.epsilon, a.w_min, a.w_max)?;
    let check = check_lemma1_condition(&reg, lambda, a.epsilon, &grid)?;
    println!("a = {}", a.a);
    println!("epsilon = {}", a.epsilon);
    println!("lambda (closed form) = {closed}");
    println!("lambda (grid supremum) = {needed}");
    println!("bound = {}", poa_bound(&b));
    println!("condition on grid: {}", if check.passed { "pass" } else { "fail" });
    Ok(ExitCode::SUCCESS)
}
