//! Solver x problem grids.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gen::{gen_qcqp, GeneratorSpec};
use crate::error::{Error, Result};
use crate::io::{self, ProblemFile};
use crate::model::{stationarity, Qcqp};
use crate::scp::{scp_solve, ScpConfig};
use crate::solver::{solve, RunReport, SolverConfig, Status};

#[derive(Debug, Clone)]
pub struct BenchProblem {
    pub id: String,
    pub problem: Qcqp,
    pub x0: DVector<f64>,
    pub lambda0: DVector<f64>,
}

impl BenchProblem {
    pub fn from_file(id: impl Into<String>, file: ProblemFile) -> Self {
        let (x0, lambda0) = (file.start_x(), file.start_lambda());
        Self { id: id.into(), problem: file.problem, x0, lambda0 }
    }
}

#[derive(Debug, Clone)]
pub enum SolverKind {
    Lal(SolverConfig),
    Scp(ScpConfig),
}

#[derive(Debug, Clone)]
pub struct SolverSpec {
    pub id: String,
    pub kind: SolverKind,
}

impl SolverSpec {
    pub fn lal(config: SolverConfig) -> Self {
        Self { id: "lal".into(), kind: SolverKind::Lal(config) }
    }

    pub fn scp(config: ScpConfig) -> Self {
        Self { id: "scp".into(), kind: SolverKind::Scp(config) }
    }

    fn run(&self, p: &BenchProblem) -> Result<RunReport> {
        match &self.kind {
            SolverKind::Lal(c) => solve(&p.problem, &p.x0, &p.lambda0, c),
            SolverKind::Scp(c) => scp_solve(&p.problem, &p.x0, c),
        }
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub problem: String,
    pub solver: String,
    pub status: Status,
    pub iters: usize,
    pub time_s: f64,
    pub f_final: f64,
    pub feas_norm: f64,
    pub stat_norm: f64,
    /// Error text of a failed run; not written to the CSV.
    #[serde(skip)]
    pub message: Option<String>,
}

impl BenchResult {
    fn from_report(p: &BenchProblem, solver: &str, report: &RunReport, time_s: f64) -> Self {
        let x = DVector::from_column_slice(&report.x);
        let lambda = DVector::from_column_slice(&report.lambda);
        let stat = stationarity(&p.problem, &x, &lambda).map(|r| r.grad_lag_norm).unwrap_or(f64::NAN);
        Self {
            problem: p.id.clone(),
            solver: solver.to_string(),
            status: report.status,
            iters: report.iterations,
            time_s,
            f_final: report.final_objective(),
            feas_norm: report.residual.feas_norm,
            stat_norm: stat,
            message: report.message.clone(),
        }
    }

    fn failed(p: &BenchProblem, solver: &str, err: &Error, time_s: f64) -> Self {
        Self {
            problem: p.id.clone(),
            solver: solver.to_string(),
            status: Status::SubproblemFailure,
            iters: 0,
            time_s,
            f_final: f64::NAN,
            feas_norm: f64::NAN,
            stat_norm: f64::NAN,
            message: Some(err.to_string()),
        }
    }
}

fn trace_path(dir: &Path, problem: &str, solver: &str) -> PathBuf {
    dir.join(format!("{problem}.{solver}.csv"))
}

/// Runs every solver on every problem with up to `parallelism` threads.
/// Rows come back in (problem, solver) order. A run that errors is recorded
/// as `SubproblemFailure`; the suite continues.
pub fn run_suite(
    problems: &[BenchProblem],
    solvers: &[SolverSpec],
    parallelism: usize,
    trace_dir: Option<&Path>,
) -> Result<Vec<BenchResult>> {
    for (i, s) in solvers.iter().enumerate() {
        if solvers[..i].iter().any(|t| t.id == s.id) {
            return Err(Error::Config(format!("duplicate solver id {:?}", s.id)));
        }
    }
    for (i, p) in problems.iter().enumerate() {
        if problems[..i].iter().any(|q| q.id == p.id) {
            return Err(Error::Config(format!("duplicate problem id {:?}", p.id)));
        }
    }
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let jobs: Vec<(&BenchProblem, &SolverSpec)> =
        problems.iter().flat_map(|p| solvers.iter().map(move |s| (p, s))).collect();
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|&(p, s)| {
                let start = Instant::now();
                let outcome = s.run(p);
                let elapsed = start.elapsed().as_secs_f64();
                match outcome {
                    Ok(report) => {
                        if let Some(dir) = trace_dir {
                            let alpha = match &s.kind {
                                SolverKind::Lal(c) => c.alpha,
                                SolverKind::Scp(_) => 0.0,
                            };
                            let path = trace_path(dir, &p.id, &s.id);
                            if let Err(e) = io::write_trace(&path, &s.id, alpha, &report) {
                                log::warn!("{}: {e}", path.display());
                            }
                        }
                        BenchResult::from_report(p, &s.id, &report, elapsed)
                    }
                    Err(e) => {
                        log::warn!("{} on {}: {e}", s.id, p.id);
                        BenchResult::failed(p, &s.id, &e, elapsed)
                    }
                }
            })
            .collect()
    }))
}

/// Loads every `*.json` problem file in `dir`, sorted by file name. The id is
/// the file stem.
pub fn load_suite(dir: &Path) -> Result<Vec<BenchProblem>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && !p.to_string_lossy().ends_with(".iterates.json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(BenchProblem::from_file(id, ProblemFile::read(&path)?))
        })
        .collect()
}

/// Dense `(n, m)` classes followed by the sparse ones, one instance each.
pub fn default_suite(seed: u64) -> Vec<(String, GeneratorSpec)> {
    let dense = [(10, 9), (20, 13), (50, 43), (100, 91)];
    let sparse = [(1000, 500), (10000, 500)];
    let mut out = Vec::new();
    for (i, &(n, m)) in dense.iter().enumerate() {
        out.push((format!("dense_{n}_{m}"), GeneratorSpec::new(n, m, seed.wrapping_add(i as u64))));
    }
    for (i, &(n, m)) in sparse.iter().enumerate() {
        let spec = GeneratorSpec { density: 2.0 / n as f64, ..GeneratorSpec::new(n, m, seed.wrapping_add(100 + i as u64)) };
        out.push((format!("sparse_{n}_{m}"), spec));
    }
    out
}

/// Generates a suite into problem files.
pub fn write_suite(dir: &Path, specs: &[(String, GeneratorSpec)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (id, spec) in specs {
        let (problem, x0) = gen_qcqp(spec)?;
        let mut file = ProblemFile::new(problem);
        file.x0 = Some(x0);
        file.write(&dir.join(format!("{id}.json")))?;
    }
    Ok(())
}

pub fn write_results_csv<W: std::io::Write>(out: W, results: &[BenchResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(r)?;
    }
    if results.is_empty() {
        w.write_record(["problem", "solver", "status", "iters", "time_s", "f_final", "feas_norm", "stat_norm"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: std::io::Read>(input: R) -> Result<Vec<BenchResult>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
