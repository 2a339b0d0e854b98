//! `lal`: generate QCQPs, run the linearized augmented Lagrangian and SCP
//! solvers, certify traces, and benchmark solver grids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lal_core::bench::{
    default_suite, gen_qcqp, load_suite, performance_profile, read_results_csv, run_suite, write_profile_csv,
    write_results_csv, write_suite, GeneratorSpec, Metric, SolverKind, SolverSpec,
};
use lal_core::io::{read_constants, read_sidecar, write_trace, ProblemFile};
use lal_core::scp::{scp_solve, ScpConfig};
use lal_core::theory::{self, TheoryParams};
use lal_core::{
    check_derivatives, estimate_constants, solve, BetaPolicy, InstanceConstants, NlpOracle, RunReport, SolverConfig,
    Status,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "lal", version, about = "Linearized augmented Lagrangian solver and QCQP benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random QCQP problem file (or the default suite with --default-suite).
    Gen(GenArgs),
    /// Solve one problem file.
    Solve(SolveArgs),
    /// Check derivatives and report constants at the starting point.
    Check {
        #[arg(long)]
        problem: PathBuf,
    },
    /// Evaluate the convergence-analysis checks on a recorded LAL trace.
    Certify {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// JSON object with any of M_f, L_f, M_F, L_F, sigma, rho0, U_bar, L_bar, c0.
        #[arg(long)]
        constants: Option<PathBuf>,
    },
    /// Run every solver on every problem file in a directory.
    Bench(BenchArgs),
    /// Performance profiles from a results CSV.
    Profile {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "time")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, required_unless_present = "default_suite")]
    n: Option<usize>,
    #[arg(long, required_unless_present = "default_suite")]
    m: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    #[arg(long, default_value_t = 0.1)]
    mu_lo: f64,
    #[arg(long, default_value_t = 1.0)]
    mu_hi: f64,
    /// Set each c_i so that F(x0) = 0.
    #[arg(long)]
    feasible_start: bool,
    /// Approximate spectral norm of each A_i.
    #[arg(long, default_value_t = 1.0)]
    constraint_scale: f64,
    /// Write the six default size classes into the directory given by --out.
    #[arg(long)]
    default_suite: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverName {
    Lal,
    Scp,
}

#[derive(clap::Args)]
struct SolveArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long, value_enum, default_value = "lal")]
    solver: SolverName,
    #[arg(long, default_value_t = 1e3)]
    rho: f64,
    /// Proximal weight; the first trial value with --backtrack.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Choose beta_k by the curvature condition instead of holding it fixed.
    #[arg(long)]
    backtrack: bool,
    #[arg(long, default_value_t = 1e-3)]
    eps1: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps2: f64,
    #[arg(long)]
    eps_stat: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Trace CSV; full iterates go to `<FILE>.iterates.json`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Comma-separated: lal (constant beta = 1), lal-bt (backtracking), scp.
    #[arg(long, default_value = "lal,scp")]
    solvers: String,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[arg(long)]
    out: PathBuf,
    /// Write one trace CSV per run into this directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
}

fn backtracking(init: f64) -> BetaPolicy {
    BetaPolicy::Backtracking { init, eta: 2.0, min: 1e-8, max: 1e12 }
}

fn gen(args: GenArgs) -> Result<()> {
    if args.default_suite {
        let specs = default_suite(args.seed);
        write_suite(&args.out, &specs).with_context(|| format!("writing suite to {}", args.out.display()))?;
        println!("wrote {} problems to {}", specs.len(), args.out.display());
        return Ok(());
    }
    let (Some(n), Some(m)) = (args.n, args.m) else { bail!("--n and --m are required") };
    let spec = GeneratorSpec {
        n,
        m,
        seed: args.seed,
        density: args.density,
        mu_lo: args.mu_lo,
        mu_hi: args.mu_hi,
        constraint_scale: args.constraint_scale,
        feasible_start: args.feasible_start,
    };
    let (problem, x0) = gen_qcqp(&spec)?;
    let mut file = ProblemFile::new(problem);
    file.x0 = Some(x0);
    file.write(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn read_problem(path: &Path) -> Result<ProblemFile> {
    ProblemFile::read(path).with_context(|| format!("reading problem {}", path.display()))
}

fn summary(report: &RunReport) -> serde_json::Value {
    json!({
        "status": report.status.as_str(),
        "iterations": report.iterations,
        "f": report.final_objective(),
        "feas_norm": report.residual.feas_norm,
        "stat_norm": report.residual.grad_lag_norm,
        "time_s": report.wall_time_s,
        "x": report.x,
        "lambda": report.lambda,
        "message": report.message,
    })
}

fn solve_cmd(args: SolveArgs) -> Result<ExitCode> {
    let file = read_problem(&args.problem)?;
    let (x0, lambda0) = (file.start_x(), file.start_lambda());
    let report = match args.solver {
        SolverName::Lal => {
            let mut cfg = SolverConfig {
                rho: args.rho,
                beta: if args.backtrack { backtracking(args.beta) } else { BetaPolicy::Constant(args.beta) },
                alpha: args.alpha,
                eps1: args.eps1,
                eps2: args.eps2,
                eps_stat: args.eps_stat,
                max_iter: args.max_iter,
                ..SolverConfig::default()
            };
            // complete constants in the problem file fill the gamma and P trace columns
            if let Some(c) = file.constants.as_ref().and_then(|c| InstanceConstants::from_file(c).ok()) {
                cfg.constants = Some(c);
                cfg.record_theory = true;
            }
            solve(&file.problem, &x0, &lambda0, &cfg)?
        }
        SolverName::Scp => {
            if args.backtrack {
                log::warn!("--backtrack has no effect for scp");
            }
            let cfg = ScpConfig {
                beta: args.beta,
                eps1: args.eps1,
                eps2: args.eps2,
                eps_stat: args.eps_stat,
                max_iter: args.max_iter,
                ..ScpConfig::default()
            };
            scp_solve(&file.problem, &x0, &cfg)?
        }
    };
    if let Some(path) = &args.trace {
        let name = match args.solver {
            SolverName::Lal => "lal",
            SolverName::Scp => "scp",
        };
        write_trace(path, name, args.alpha, &report).with_context(|| format!("writing trace {}", path.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&summary(&report))?);
    Ok(if report.status == Status::Converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn check(problem: &Path) -> Result<ExitCode> {
    let file = read_problem(problem)?;
    let p = &file.problem;
    let x0 = file.start_x();
    let derivatives = check_derivatives(p, 100, 0)?;
    let at_x0 = estimate_constants(p, &[x0.clone(), x0.clone()])?;
    let out = json!({
        "n": p.dim(),
        "m": p.num_constraints(),
        "derivatives": derivatives,
        "feas_norm_x0": p.constraints(&x0).norm(),
        "constants_at_x0": at_x0.constants,
        "warnings": at_x0.warnings,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(if derivatives.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn certify(problem: &Path, trace: &Path, constants: Option<&Path>) -> Result<()> {
    let file = read_problem(problem)?;
    let side = read_sidecar(trace).with_context(|| format!("reading iterates for {}", trace.display()))?;
    if side.solver != "lal" {
        bail!("certify applies to lal traces, {} was written by {}", trace.display(), side.solver);
    }
    let xs: Vec<_> = side.records.iter().map(|r| r.x_vec()).collect();
    let estimate = estimate_constants(&file.problem, &xs)?;
    for w in &estimate.warnings {
        log::warn!("{w}");
    }
    let mut c = estimate.constants;
    if let Some(fc) = &file.constants {
        c = c.with_overrides(fc);
    }
    if let Some(path) = constants {
        let fc = read_constants(path).with_context(|| format!("reading constants {}", path.display()))?;
        c = c.with_overrides(&fc);
    }
    let beta_max = side.records.iter().skip(1).map(|r| r.beta).fold(0.0, f64::max);
    let params = TheoryParams::automatic(&c, side.alpha, beta_max, 2.0);
    let d_s = theory::trajectory_diameter(&side.records);
    match theory::rho_lower_bound(&c, &params, Some(d_s)) {
        Ok(bound) if side.rho < bound => {
            log::warn!("rho = {} is below the analysis bound {bound:e}; decrease checks may fail", side.rho)
        }
        Ok(_) => {}
        Err(e) => log::warn!("rho lower bound unavailable: {e}"),
    }
    let summaries = theory::certify(&file.problem, &side.records, side.rho, &params, &c, &file.start_lambda())?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "check,passed,total,pass_rate,worst_margin")?;
    for s in summaries {
        writeln!(out, "{},{},{},{},{}", s.name, s.passed, s.total, s.pass_rate(), s.worst_margin)?;
    }
    Ok(())
}

fn parse_solvers(list: &str, max_iter: usize) -> Result<Vec<SolverSpec>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            let kind = match name {
                "lal" => SolverKind::Lal(SolverConfig { max_iter, ..SolverConfig::default() }),
                "lal-bt" => SolverKind::Lal(SolverConfig { max_iter, beta: backtracking(1.0), ..SolverConfig::default() }),
                "scp" => SolverKind::Scp(ScpConfig { max_iter, ..ScpConfig::default() }),
                other => bail!("unknown solver {other:?}, expected lal, lal-bt or scp"),
            };
            Ok(SolverSpec { id: name.to_string(), kind })
        })
        .collect()
}

fn bench(args: BenchArgs) -> Result<()> {
    let problems = load_suite(&args.suite).with_context(|| format!("loading suite {}", args.suite.display()))?;
    if problems.is_empty() {
        bail!("no problem files in {}", args.suite.display());
    }
    let solvers = parse_solvers(&args.solvers, args.max_iter)?;
    if solvers.is_empty() {
        bail!("--solvers is empty");
    }
    if let Some(dir) = &args.trace_dir {
        std::fs::create_dir_all(dir)?;
    }
    let results = run_suite(&problems, &solvers, args.parallelism.max(1), args.trace_dir.as_deref())?;
    write_results_csv(BufWriter::new(File::create(&args.out)?), &results)?;
    let converged = results.iter().filter(|r| r.status == Status::Converged).count();
    println!("{} runs, {converged} converged, results in {}", results.len(), args.out.display());
    Ok(())
}

fn profile(input: &Path, metric: &str, out: &Path) -> Result<()> {
    let metric: Metric = metric.parse()?;
    let results = read_results_csv(BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?))?;
    let prof = performance_profile(&results, metric)?;
    for p in &prof.excluded {
        log::warn!("{p}: no solver converged, excluded");
    }
    write_profile_csv(BufWriter::new(File::create(out)?), &prof)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen(args) => gen(args).map(|_| ExitCode::SUCCESS),
        Command::Solve(args) => solve_cmd(args),
        Command::Check { problem } => check(&problem),
        Command::Certify { problem, trace, constants } => {
            certify(&problem, &trace, constants.as_deref()).map(|_| ExitCode::SUCCESS)
        }
        Command::Bench(args) => bench(args).map(|_| ExitCode::SUCCESS),
        Command::Profile { input, metric, out } => profile(&input, &metric, &out).map(|_| ExitCode::SUCCESS),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
