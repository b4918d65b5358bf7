//! Command-line front end: `solve-flp`, `solve-flpo`, `solve-lmdp`, `verify`
//! and `generate`.
//!
//! Exit codes: 0 for a feasible solve (or oracle agreement), 2 when the
//! solver ends infeasible (or disagrees with the oracle), 1 for usage and
//! I/O errors. Diagnostics go to standard error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use capanneal::flpo::{backward_policy, facility_usage_flpo, step_cost, step_prices};
use capanneal::io::{
    emit_trace, generate_instance, instance_to_json, load_instance, save_solution, solution_json,
    GenerateParams, Instance, ProblemKind, SolutionRef,
};
use capanneal::lmdp::anneal_lmdp;
use capanneal::oracles::{oracle_flp, oracle_flpo_paths, oracle_lmdp};
use capanneal::{
    flp, flpo, lmdp, AnnealSchedule, Error, FixedPointConfig, PenaltyConfig, SolverTrace,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "capanneal",
    version,
    about = "Capacity-constrained deterministic annealing"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Capacitated facility location.
    SolveFlp(SolveArgs),
    /// Facility location with path optimization.
    SolveFlpo(SolveArgs),
    /// Last-mile delivery scheduling.
    SolveLmdp(SolveArgs),
    /// Solve, then compare against the brute-force reference.
    Verify(SolveArgs),
    /// Write a seeded random instance.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Solution (or verification report) file; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV trace of the annealing ladder.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    betap_min: Option<f64>,
    #[arg(long)]
    betap_max: Option<f64>,
    #[arg(long)]
    alphap: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    /// Feasibility tolerance on every slack.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ignore the capacities in the instance.
    #[arg(long)]
    unconstrained: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Flp,
    Flpo,
    Lmdp,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(value_enum)]
    kind: Kind,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    facilities: usize,
    #[arg(long, default_value_t = 4.0)]
    width: f64,
    #[arg(long, default_value_t = 4.0)]
    height: f64,
    /// Comma-separated facility capacities.
    #[arg(long, value_delimiter = ',')]
    capacities: Option<Vec<f64>>,
    #[arg(long, default_value_t = 4)]
    depots: usize,
    #[arg(long, default_value_t = 3)]
    vehicles: usize,
    #[arg(long, default_value_t = 3)]
    packages: usize,
    #[arg(long, default_value_t = 4)]
    max_route_len: usize,
    #[arg(long)]
    vehicle_capacity: Option<f64>,
}

enum Outcome {
    Ok,
    Infeasible,
}

/// Runs one command line (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::Infeasible) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(command: Command) -> capanneal::Result<Outcome> {
    match command {
        Command::SolveFlp(a) => solve(&a, Some(ProblemKind::Flp)),
        Command::SolveFlpo(a) => solve(&a, Some(ProblemKind::Flpo)),
        Command::SolveLmdp(a) => solve(&a, Some(ProblemKind::Lmdp)),
        Command::Verify(a) => verify(&a),
        Command::Generate(g) => generate(&g),
    }
}

fn configs(a: &SolveArgs, mut schedule: AnnealSchedule) -> (AnnealSchedule, PenaltyConfig) {
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut schedule.beta_min, a.beta_min);
    set(&mut schedule.beta_max, a.beta_max);
    set(&mut schedule.alpha, a.alpha);
    set(&mut schedule.betap_min, a.betap_min);
    set(&mut schedule.betap_max, a.betap_max);
    set(&mut schedule.alphap, a.alphap);
    let mut penalty = PenaltyConfig::default();
    set(&mut penalty.theta, a.theta);
    set(&mut penalty.epsilon_feasible, a.eps);
    (schedule, penalty)
}

fn load(a: &SolveArgs, expect: Option<ProblemKind>) -> capanneal::Result<Instance> {
    let inst = load_instance(&a.instance)?;
    if let Some(kind) = expect {
        if inst.kind() != kind {
            return Err(Error::InvalidInstance(format!(
                "{} holds a {} instance, not {kind}",
                a.instance.display(),
                inst.kind()
            )));
        }
    }
    Ok(if a.unconstrained {
        match inst {
            Instance::Flp(i) => Instance::Flp(i.without_capacities()),
            Instance::Flpo(i) => Instance::Flpo(i.without_capacities()),
            Instance::Lmdp(i) => Instance::Lmdp(i.with_capacity(None)?),
        }
    } else {
        inst
    })
}

enum Solved {
    Flp(capanneal::FlpInstance, capanneal::FlpSolution),
    Flpo(capanneal::FlpoInstance, capanneal::FlpoSolution),
    Lmdp(capanneal::LmdpInstance, capanneal::DeliveryPlan),
}

impl Solved {
    fn feasible(&self) -> bool {
        match self {
            Solved::Flp(_, s) => s.feasible,
            Solved::Flpo(_, s) => s.feasible,
            Solved::Lmdp(_, p) => p.feasible,
        }
    }

    fn trace(&self) -> &SolverTrace {
        match self {
            Solved::Flp(_, s) => &s.trace,
            Solved::Flpo(_, s) => &s.trace,
            Solved::Lmdp(_, p) => &p.trace,
        }
    }

    fn as_ref(&self) -> SolutionRef<'_> {
        match self {
            Solved::Flp(_, s) => SolutionRef::Flp(s),
            Solved::Flpo(i, s) => SolutionRef::Flpo(i, s),
            Solved::Lmdp(i, p) => SolutionRef::Lmdp(i, p),
        }
    }
}

fn run_solver(a: &SolveArgs, inst: Instance) -> capanneal::Result<Solved> {
    let fp = FixedPointConfig::default();
    Ok(match inst {
        Instance::Flp(i) => {
            let (schedule, penalty) = configs(a, flp::default_schedule(&i));
            let s = flp::anneal_flp(&i, &schedule, &penalty, &fp, a.seed)?;
            Solved::Flp(i, s)
        }
        Instance::Flpo(i) => {
            let (schedule, penalty) = configs(a, flpo::default_schedule(&i));
            let s = flpo::anneal_flpo(&i, &schedule, &penalty, &fp, a.seed)?;
            Solved::Flpo(i, s)
        }
        Instance::Lmdp(i) => {
            let (schedule, penalty) = configs(a, lmdp::default_schedule());
            let p = anneal_lmdp(&i, &schedule, &penalty, &fp)?;
            Solved::Lmdp(i, p)
        }
    })
}

fn write_text(path: Option<&Path>, text: &str) -> capanneal::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn solve(a: &SolveArgs, expect: Option<ProblemKind>) -> capanneal::Result<Outcome> {
    let solved = run_solver(a, load(a, expect)?)?;
    match &a.out {
        Some(p) => save_solution(p, solved.as_ref())?,
        None => {
            let text = serde_json::to_string_pretty(&solution_json(solved.as_ref()))
                .expect("serializable")
                + "\n";
            write_text(None, &text)?;
        }
    }
    if let Some(t) = &a.trace {
        emit_trace(t, solved.trace())?;
    }
    if solved.feasible() {
        Ok(Outcome::Ok)
    } else {
        eprintln!("warning: capacities still violated at the end of the schedule");
        Ok(Outcome::Infeasible)
    }
}

/// Relative agreement demanded between annealed and exhaustive optima.
const COST_AGREEMENT: f64 = 0.01;
/// Agreement demanded between recursive and enumerated path usage.
const USAGE_AGREEMENT: f64 = 1e-9;

fn verify(a: &SolveArgs) -> capanneal::Result<Outcome> {
    let solved = run_solver(a, load(a, None)?)?;
    let (agree, report) = match &solved {
        Solved::Flp(i, s) => {
            let oracle = oracle_flp(i, i.capacities().is_some())?;
            let gap = (s.cost - oracle.optimum) / oracle.optimum.abs().max(f64::MIN_POSITIVE);
            let agree = gap <= COST_AGREEMENT && s.feasible;
            (
                agree,
                serde_json::json!({
                    "problem": "flp",
                    "annealed_cost": s.cost,
                    "oracle_cost": oracle.optimum,
                    "relative_gap": gap,
                    "feasible": s.feasible,
                    "assignments_searched": oracle.searched,
                    "agree": agree,
                }),
            )
        }
        Solved::Flpo(i, s) => {
            // Recompute the final relaxed policy both ways and compare the
            // facility usage it implies.
            let (policy, locations) = s
                .relaxed
                .clone()
                .ok_or_else(|| Error::InvalidInstance("no relaxed policy recorded".into()))?;
            let usage = facility_usage_flpo(i, &policy);
            let penalty = configs(a, AnnealSchedule::default()).1;
            let prices = match i.capacities() {
                Some(w) => step_prices(&usage, w, s.final_beta_prime, &penalty),
                None => vec![0.0; i.facility_count()],
            };
            let (recursive, _) = backward_policy(&step_cost(i, &locations), s.final_beta, &prices)?;
            let recursive_usage = facility_usage_flpo(i, &recursive);
            let oracle = oracle_flpo_paths(
                i,
                &locations,
                s.final_beta,
                s.final_beta_prime,
                &penalty,
                &usage,
            )?;
            let enumerated = oracle.usage(i.weights(), i.facility_count());
            let err = recursive_usage
                .iter()
                .zip(&enumerated)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let agree = err <= USAGE_AGREEMENT;
            (
                agree,
                serde_json::json!({
                    "problem": "flpo",
                    "beta": s.final_beta,
                    "beta_prime": s.final_beta_prime,
                    "recursive_usage": recursive_usage,
                    "enumerated_usage": enumerated,
                    "max_abs_error": err,
                    "paths_per_node": oracle.paths.len(),
                    "agree": agree,
                }),
            )
        }
        Solved::Lmdp(i, p) => match oracle_lmdp(i) {
            Ok(oracle) => {
                let gap =
                    (p.total_cost - oracle.optimum) / oracle.optimum.abs().max(f64::MIN_POSITIVE);
                let agree = p.feasible && gap.abs() <= COST_AGREEMENT;
                (
                    agree,
                    serde_json::json!({
                        "problem": "lmdp",
                        "annealed_cost": p.total_cost,
                        "oracle_cost": oracle.optimum,
                        "relative_gap": gap,
                        "feasible": p.feasible,
                        "plans_searched": oracle.searched,
                        "agree": agree,
                    }),
                )
            }
            Err(Error::Infeasible(why)) => {
                let agree = !p.feasible;
                (
                    agree,
                    serde_json::json!({
                        "problem": "lmdp",
                        "annealed_cost": p.total_cost,
                        "oracle": format!("infeasible: {why}"),
                        "feasible": p.feasible,
                        "agree": agree,
                    }),
                )
            }
            Err(e) => return Err(e),
        },
    };
    let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
    write_text(a.out.as_deref(), &text)?;
    if let Some(t) = &a.trace {
        emit_trace(t, solved.trace())?;
    }
    if agree {
        Ok(Outcome::Ok)
    } else {
        eprintln!("warning: annealed solution disagrees with the exhaustive reference");
        Ok(Outcome::Infeasible)
    }
}

fn generate(g: &GenerateArgs) -> capanneal::Result<Outcome> {
    let kind = match g.kind {
        Kind::Flp => ProblemKind::Flp,
        Kind::Flpo => ProblemKind::Flpo,
        Kind::Lmdp => ProblemKind::Lmdp,
    };
    let params = GenerateParams {
        nodes: g.nodes,
        facilities: g.facilities,
        width: g.width,
        height: g.height,
        capacities: g.capacities.clone(),
        destination: None,
        depots: g.depots,
        vehicles: g.vehicles,
        packages: g.packages,
        max_route_len: g.max_route_len,
        vehicle_capacity: g.vehicle_capacity,
    };
    let inst = generate_instance(kind, g.seed, &params)?;
    write_text(g.out.as_deref(), &instance_to_json(&inst))?;
    Ok(Outcome::Ok)
}
