//! Outer loop of the linearized augmented Lagrangian method.
//!
//! Iteration `k -> k+1`:
//! 1. pick `beta_{k+1}` (constant, or backtracking on the curvature condition
//!    for `psi(x, lambda) = <lambda, F(x)> + rho/2 ||F(x)||^2`);
//! 2. `x_{k+1} = argmin phi` (see [`crate::subproblem`]);
//! 3. `lambda_{k+1} = lambda_k + rho (F(x_k) + J_k (x_{k+1} - x_k))`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, InstanceConstants, NlpOracle, StationarityResidual};
use crate::subproblem::{self, SubproblemData, SubproblemSolution};
use crate::theory;

/// How `beta_{k+1}` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BetaPolicy {
    Constant(f64),
    /// Start at `init` (first iteration) or `max(min, last / eta)`, multiply by
    /// `eta` until the curvature condition holds, fail beyond `max`.
    Backtracking { init: f64, eta: f64, min: f64, max: f64 },
}

impl BetaPolicy {
    pub fn initial(&self) -> f64 {
        match *self {
            BetaPolicy::Constant(b) => b,
            BetaPolicy::Backtracking { init, .. } => init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubproblemMode {
    Direct,
    Iterative,
    /// Direct when the objective is an explicit quadratic.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub rho: f64,
    pub beta: BetaPolicy,
    pub alpha: f64,
    /// Stop on `|f_k - f_{k-1}| <= eps1` together with `||F(x_k)|| <= eps2`.
    pub eps1: f64,
    pub eps2: f64,
    /// Alternative stop on `||grad L_rho(x_k, lambda_k)||`.
    pub eps_stat: Option<f64>,
    pub max_iter: usize,
    pub subproblem: SubproblemMode,
    pub inner_tol: f64,
    /// Defaults to [`subproblem::default_max_inner`].
    pub max_inner: Option<usize>,
    /// Treat an unconverged inner solve as a warning instead of a failure.
    pub warn_on_inner_failure: bool,
    /// Double `beta` and retry when the subproblem is not strongly convex.
    pub auto_increase_beta: bool,
    /// Fill `gamma` and `P` in each record; needs `constants`.
    pub record_theory: bool,
    pub constants: Option<InstanceConstants>,
    /// Exponent of the `gamma_k` formula.
    pub eta: f64,
    /// When set, warn if `||F(x0)||^2 > min(1, c0 / rho)`.
    pub init_c0: Option<f64>,
    pub divergence_limit: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 1e3,
            beta: BetaPolicy::Constant(1.0),
            alpha: 0.5,
            eps1: 1e-3,
            eps2: 1e-5,
            eps_stat: None,
            max_iter: 10_000,
            subproblem: SubproblemMode::Auto,
            inner_tol: subproblem::DEFAULT_INNER_TOL,
            max_inner: None,
            warn_on_inner_failure: false,
            auto_increase_beta: false,
            record_theory: false,
            constants: None,
            eta: 2.0,
            init_c0: None,
            divergence_limit: 1e12,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.rho > 0.0) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.eps1 > 0.0 && self.eps2 > 0.0) || self.eps_stat.is_some_and(|e| !(e > 0.0)) {
            return bad("tolerances must be positive".into());
        }
        if !(self.inner_tol > 0.0) {
            return bad(format!("inner_tol must be positive, got {}", self.inner_tol));
        }
        match self.beta {
            BetaPolicy::Constant(b) if !(b > 0.0) => return bad(format!("beta must be positive, got {b}")),
            BetaPolicy::Backtracking { init, eta, min, max } => {
                if !(min > 0.0 && min <= init && init <= max) {
                    return bad(format!("need 0 < beta_min <= beta_init <= beta_max, got {min}, {init}, {max}"));
                }
                if !(eta > 1.0) {
                    return bad(format!("backtracking factor must exceed 1, got {eta}"));
                }
            }
            _ => {}
        }
        if self.record_theory && self.constants.is_none() {
            return Err(Error::MissingConstants("record_theory needs instance constants".into()));
        }
        if !(self.eta > 1.0) {
            return bad(format!("eta must exceed 1, got {}", self.eta));
        }
        Ok(())
    }
}

/// State after iteration `k`. Record 0 is the starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `beta_k`, the proximal weight that produced `x_k` (initial value at k = 0).
    pub beta: f64,
    pub f: f64,
    pub feas_norm: f64,
    /// `||grad_x L_rho(x_k, lambda_k)||`.
    pub grad_lag_x_norm: f64,
    /// `||grad_lambda L_rho(x_k, lambda_k)|| = ||F(x_k)||`.
    pub grad_lag_lambda_norm: f64,
    /// `L_rho(x_k, lambda_k)`.
    pub lagrangian: f64,
    pub gamma: Option<f64>,
    pub p: Option<f64>,
    pub dx_norm: f64,
    pub dlambda_norm: f64,
    /// Curvature condition on `psi` held at `beta_k`.
    pub descent_ok: bool,
    /// `rhs - lhs` of `L_rho(x_k, l_{k-1}) - L_rho(x_{k-1}, l_{k-1}) <=
    /// -rho/2 ||J dx||^2 - alpha beta/2 ||dx||^2 + 1e-8 (1 + |L_rho|)`.
    pub descent_margin: f64,
    /// Same inequality with `rho sigma^2 ||dx||^2` in place of `rho ||J dx||^2`;
    /// evaluated only when constants are configured.
    pub sigma_descent_ok: Option<bool>,
    /// `||grad f(x_k) + J_{k-1}^T lambda_k + beta_k (x_k - x_{k-1})||`.
    pub optimality_residual: f64,
    pub inner_iters: usize,
    pub wall_time_s: f64,
}

impl IterationRecord {
    pub fn x_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x)
    }

    pub fn lambda_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.lambda)
    }

    /// `||grad L_rho(x_k, lambda_k)||` over both blocks.
    pub fn grad_lag_norm(&self) -> f64 {
        self.grad_lag_x_norm.hypot(self.grad_lag_lambda_norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    MaxIter,
    SubproblemFailure,
    Diverged,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Converged => "Converged",
            Status::MaxIter => "MaxIter",
            Status::SubproblemFailure => "SubproblemFailure",
            Status::Diverged => "Diverged",
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Status {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Converged" => Ok(Status::Converged),
            "MaxIter" => Ok(Status::MaxIter),
            "SubproblemFailure" => Ok(Status::SubproblemFailure),
            "Diverged" => Ok(Status::Diverged),
            other => Err(Error::Format(format!("unknown status {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub status: Status,
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub residual: StationarityResidual,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
    pub wall_time_s: f64,
    pub rho: f64,
    /// Reason for a non-converged status.
    pub message: Option<String>,
}

impl RunReport {
    pub fn final_objective(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.f)
    }
}

/// `f(x) + <lambda, F(x)> + rho/2 ||F(x)||^2`.
pub fn augmented_lagrangian(problem: &dyn NlpOracle, x: &DVector<f64>, lambda: &DVector<f64>, rho: f64) -> f64 {
    problem.objective(x) + psi(problem, x, lambda, rho)
}

/// `<lambda, F(x)> + rho/2 ||F(x)||^2`.
pub fn psi(problem: &dyn NlpOracle, x: &DVector<f64>, lambda: &DVector<f64>, rho: f64) -> f64 {
    let c = problem.constraints(x);
    lambda.dot(&c) + 0.5 * rho * c.norm_squared()
}

/// `grad_x psi = J(x)^T (lambda + rho F(x))`.
pub fn grad_psi(problem: &dyn NlpOracle, x: &DVector<f64>, lambda: &DVector<f64>, rho: f64) -> DVector<f64> {
    problem.jacobian(x).tr_mul(&(lambda + problem.constraints(x) * rho))
}

/// `lambda_k + rho (F_k + J_k dx)`.
pub fn dual_update(
    lambda_k: &DVector<f64>,
    rho: f64,
    f_k: &DVector<f64>,
    j_k: &DMatrix<f64>,
    dx: &DVector<f64>,
) -> DVector<f64> {
    lambda_k + (f_k + j_k * dx) * rho
}

/// Residual of the curvature condition on `psi` at a trial step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureGap {
    /// `psi(x+) - psi(x_k) - <grad psi(x_k), dx>`.
    pub gap: f64,
    /// `(1 - alpha) beta / 2 ||dx||^2`.
    pub allowance: f64,
    /// Rounding allowance on `gap`.
    pub tolerance: f64,
}

impl CurvatureGap {
    pub fn holds(&self) -> bool {
        self.gap <= self.allowance + self.tolerance
    }
}

/// Evaluates the curvature gap in the cancellation-free form
/// `<lambda + rho F_k, r> + rho/2 ||J dx + r||^2`, `r = F(x+) - F_k - J dx`.
///
/// `r` inherits the rounding error of evaluating `F`, which is relative to
/// the terms summed inside `F` rather than to `F` itself; near a feasible
/// point those terms are of size `||J|| ||x||`.
pub fn curvature_gap(data: &SubproblemData, f_next: &DVector<f64>, dx: &DVector<f64>, alpha: f64) -> CurvatureGap {
    let jdx = &data.j_k * dx;
    let r = f_next - &data.f_k - &jdx;
    let w = &data.lambda_k + &data.f_k * data.rho;
    let gap = w.dot(&r) + 0.5 * data.rho * (&jdx + &r).norm_squared();
    let x_next = &data.x_k + dx;
    let terms = f_next.norm() + data.f_k.norm() + data.j_k.norm() * (data.x_k.norm() + x_next.norm());
    let step = jdx.norm() + r.norm();
    let scale = w.norm() * (terms + jdx.norm()) + data.rho * step * (step + terms);
    CurvatureGap {
        gap,
        allowance: 0.5 * (1.0 - alpha) * data.beta * dx.norm_squared(),
        tolerance: 16.0 * f64::EPSILON * scale,
    }
}

/// A subproblem solution accepted by the proximal-parameter rule.
#[derive(Debug, Clone)]
pub struct AcceptedStep {
    pub beta: f64,
    pub solution: SubproblemSolution,
    pub f_next: DVector<f64>,
    pub gap: CurvatureGap,
    pub trials: usize,
}

/// Solves the subproblem at `data.beta` with the configured path.
pub fn solve_subproblem(problem: &dyn NlpOracle, data: &SubproblemData, config: &SolverConfig) -> Result<SubproblemSolution> {
    let direct = match config.subproblem {
        SubproblemMode::Direct => true,
        SubproblemMode::Iterative => false,
        SubproblemMode::Auto => problem.quadratic_objective().is_some(),
    };
    if direct {
        let (q, p) = problem
            .quadratic_objective()
            .ok_or_else(|| Error::Config("direct subproblem mode needs a quadratic objective".into()))?;
        return subproblem::solve_direct(q, p, data);
    }
    let max_inner = config.max_inner.unwrap_or_else(|| subproblem::default_max_inner(problem.dim()));
    let sol = subproblem::solve_iterative(problem, data, config.inner_tol, max_inner)?;
    if !sol.converged {
        if config.warn_on_inner_failure {
            log::warn!("inner solver stopped at {} iterations, gradient norm {:e}", sol.inner_iters, sol.kkt_residual);
        } else {
            return Err(Error::InnerNotConverged { iterations: sol.inner_iters, residual: sol.kkt_residual });
        }
    }
    Ok(sol)
}

fn solve_with_retry(problem: &dyn NlpOracle, data: &SubproblemData, config: &SolverConfig) -> Result<(f64, SubproblemSolution)> {
    let mut data = data.clone();
    loop {
        match solve_subproblem(problem, &data, config) {
            Err(Error::NotPositiveDefinite { beta }) if config.auto_increase_beta && beta < 1e12 => {
                log::warn!("subproblem not strongly convex at beta = {beta}, retrying with {}", 2.0 * beta);
                data.beta *= 2.0;
            }
            other => return other.map(|s| (data.beta, s)),
        }
    }
}

/// Backtracking on `beta`: solve, test the curvature condition at the
/// realized step, multiply `beta` by `eta` on violation.
///
/// The first trial is `beta_init` when `last_beta` is `None`, otherwise
/// `max(beta_min, last_beta / eta)`.
pub fn backtrack_beta(
    problem: &dyn NlpOracle,
    data: &SubproblemData,
    config: &SolverConfig,
    last_beta: Option<f64>,
) -> Result<AcceptedStep> {
    let BetaPolicy::Backtracking { init, eta, min, max } = config.beta else {
        return Err(Error::Config("backtrack_beta needs a backtracking beta policy".into()));
    };
    let mut beta = match last_beta {
        Some(b) => (b / eta).max(min),
        None => init,
    };
    let mut trials = 0;
    loop {
        trials += 1;
        let trial = data.with_beta(beta);
        let solution = solve_subproblem(problem, &trial, config)?;
        let dx = &solution.x_next - &data.x_k;
        let f_next = problem.constraints(&solution.x_next);
        let gap = curvature_gap(&trial, &f_next, &dx, config.alpha);
        if gap.holds() {
            return Ok(AcceptedStep { beta, solution, f_next, gap, trials });
        }
        beta *= eta;
        if beta > max {
            return Err(Error::BetaUnbounded { beta_max: max });
        }
    }
}

/// Quantities shared by the per-iteration records.
struct PointEval {
    f: f64,
    c: DVector<f64>,
    jac: DMatrix<f64>,
    grad: DVector<f64>,
}

impl PointEval {
    fn at(problem: &dyn NlpOracle, x: &DVector<f64>) -> Self {
        Self { f: problem.objective(x), c: problem.constraints(x), jac: problem.jacobian(x), grad: problem.gradient(x) }
    }

    fn finite(&self) -> bool {
        self.f.is_finite()
            && self.c.iter().all(|v| v.is_finite())
            && self.jac.iter().all(|v| v.is_finite())
            && self.grad.iter().all(|v| v.is_finite())
    }

    fn lagrangian(&self, lambda: &DVector<f64>, rho: f64) -> f64 {
        self.f + lambda.dot(&self.c) + 0.5 * rho * self.c.norm_squared()
    }

    fn grad_lag_x(&self, lambda: &DVector<f64>, rho: f64) -> DVector<f64> {
        &self.grad + self.jac.tr_mul(&(lambda + &self.c * rho))
    }
}

/// Runs the method from `(x0, lambda0)`.
pub fn solve(problem: &dyn NlpOracle, x0: &DVector<f64>, lambda0: &DVector<f64>, config: &SolverConfig) -> Result<RunReport> {
    config.validate()?;
    model::check_dims(problem, x0, lambda0)?;
    if x0.iter().chain(lambda0.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Config("x0 and lambda0 must be finite".into()));
    }
    let start = Instant::now();
    let rho = config.rho;
    let alpha = config.alpha;
    let gamma_of = |beta: f64| config.constants.as_ref().map(|c| theory::gamma_k(beta, rho, config.eta, c));

    let mut x = x0.clone();
    let mut lambda = lambda0.clone();
    let mut cur = PointEval::at(problem, &x);
    if !cur.finite() {
        return Err(Error::NonFinite { what: "oracle at x0", point: x.iter().copied().collect() });
    }
    if let Some(c0) = config.init_c0 {
        let feas2 = cur.c.norm_squared();
        let limit = 1f64.min(c0 / rho);
        if feas2 > limit {
            log::warn!("||F(x0)||^2 = {feas2:e} exceeds min(1, c0/rho) = {limit:e}; the initialization guarantee does not apply");
        }
    }

    let mut trace = Vec::new();
    let mut beta = config.beta.initial();
    {
        let lag = cur.lagrangian(&lambda, rho);
        let gamma = if config.record_theory { gamma_of(beta) } else { None };
        trace.push(IterationRecord {
            k: 0,
            x: x.iter().copied().collect(),
            lambda: lambda.iter().copied().collect(),
            beta,
            f: cur.f,
            feas_norm: cur.c.norm(),
            grad_lag_x_norm: cur.grad_lag_x(&lambda, rho).norm(),
            grad_lag_lambda_norm: cur.c.norm(),
            lagrangian: lag,
            gamma,
            p: gamma.map(|_| lag),
            dx_norm: 0.0,
            dlambda_norm: 0.0,
            descent_ok: true,
            descent_margin: 0.0,
            sigma_descent_ok: None,
            optimality_residual: 0.0,
            inner_iters: 0,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }

    let mut status = Status::MaxIter;
    let mut message = None;
    let mut last_beta: Option<f64> = None;
    if stop_test(config, &trace) {
        status = Status::Converged;
    }

    let mut k = 0;
    while status != Status::Converged && k < config.max_iter {
        let data = SubproblemData::new(x.clone(), lambda.clone(), cur.c.clone(), cur.jac.clone(), rho, beta)?;
        let step = match config.beta {
            BetaPolicy::Backtracking { .. } => backtrack_beta(problem, &data, config, last_beta),
            BetaPolicy::Constant(_) => solve_with_retry(problem, &data, config).map(|(b, solution)| {
                let trial = data.with_beta(b);
                let dx = &solution.x_next - &x;
                let f_next = problem.constraints(&solution.x_next);
                let gap = curvature_gap(&trial, &f_next, &dx, alpha);
                AcceptedStep { beta: b, solution, f_next, gap, trials: 1 }
            }),
        };
        let step = match step {
            Ok(s) => s,
            Err(e) => {
                status = Status::SubproblemFailure;
                message = Some(e.to_string());
                break;
            }
        };
        beta = step.beta;
        last_beta = Some(beta);
        k += 1;

        let x_next = step.solution.x_next;
        let dx = &x_next - &x;
        let lambda_next = dual_update(&lambda, rho, &cur.c, &cur.jac, &dx);
        let next = PointEval::at(problem, &x_next);
        if !next.finite()
            || lambda_next.iter().any(|v| !v.is_finite())
            || x_next.norm() > config.divergence_limit
            || lambda_next.norm() > config.divergence_limit
        {
            status = Status::Diverged;
            message = Some(format!("iterate left the region |x|, |lambda| <= {:e} at k = {k}", config.divergence_limit));
            break;
        }

        // descent of L_rho(., lambda_k) along the accepted step
        let jdx = &cur.jac * &dx;
        let lag_old = cur.lagrangian(&lambda, rho);
        let lag_mid = next.lagrangian(&lambda, rho);
        let dx2 = dx.norm_squared();
        let tol = 1e-8 * (1.0 + lag_old.abs());
        let descent_margin = -0.5 * rho * jdx.norm_squared() - 0.5 * alpha * beta * dx2 + tol - (lag_mid - lag_old);
        let sigma_descent_ok = config.constants.as_ref().map(|c| {
            let s = c.sigma.value;
            lag_mid - lag_old <= -0.5 * (rho * s * s + alpha * beta) * dx2 + tol
        });

        let optimality_residual = (&next.grad + cur.jac.tr_mul(&lambda_next) + &dx * beta).norm();
        let lag_new = next.lagrangian(&lambda_next, rho);
        let gamma = if config.record_theory { gamma_of(beta) } else { None };
        trace.push(IterationRecord {
            k,
            x: x_next.iter().copied().collect(),
            lambda: lambda_next.iter().copied().collect(),
            beta,
            f: next.f,
            feas_norm: next.c.norm(),
            grad_lag_x_norm: next.grad_lag_x(&lambda_next, rho).norm(),
            grad_lag_lambda_norm: next.c.norm(),
            lagrangian: lag_new,
            gamma,
            p: gamma.map(|g| lag_new + 0.5 * g * dx2),
            dx_norm: dx.norm(),
            dlambda_norm: (&lambda_next - &lambda).norm(),
            descent_ok: step.gap.holds(),
            descent_margin,
            sigma_descent_ok,
            optimality_residual,
            inner_iters: step.solution.inner_iters,
            wall_time_s: start.elapsed().as_secs_f64(),
        });

        x = x_next;
        lambda = lambda_next;
        cur = next;
        if stop_test(config, &trace) {
            status = Status::Converged;
        }
    }

    let residual = StationarityResidual {
        grad_lag_norm: (&cur.grad + cur.jac.tr_mul(&lambda)).norm(),
        feas_norm: cur.c.norm(),
    };
    Ok(RunReport {
        status,
        x: x.iter().copied().collect(),
        lambda: lambda.iter().copied().collect(),
        residual,
        iterations: k,
        trace,
        wall_time_s: start.elapsed().as_secs_f64(),
        rho,
        message,
    })
}

/// The shared stopping rule on the latest two records.
pub(crate) fn stop_test(config: &SolverConfig, trace: &[IterationRecord]) -> bool {
    stop_rule(config.eps1, config.eps2, config.eps_stat, trace)
}

pub(crate) fn stop_rule(eps1: f64, eps2: f64, eps_stat: Option<f64>, trace: &[IterationRecord]) -> bool {
    let Some(last) = trace.last() else { return false };
    if eps_stat.is_some_and(|e| last.grad_lag_norm() <= e) {
        return true;
    }
    match trace.len() {
        0 | 1 => false,
        n => (last.f - trace[n - 2].f).abs() <= eps1 && last.feas_norm <= eps2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn lagrangian_at_feasible_point_is_objective() {
        let p = fixtures::sphere_linear();
        let x = dv(&[1.0, 0.0]);
        assert_eq!(augmented_lagrangian(&p, &x, &dv(&[2.5]), 1e3), 3.0);
        let q = fixtures::half_norm_linear();
        assert_eq!(augmented_lagrangian(&q, &dv(&[1.0, 3.0]), &dv(&[-7.0]), 5.0), 5.0);
    }

    #[test]
    fn lagrangian_by_substitution() {
        // f = 0, F = x, evaluated at x = 0.5
        let p = fixtures::identity_constraint_1d();
        assert_abs_diff_eq!(augmented_lagrangian(&p, &dv(&[0.5]), &dv(&[1.0]), 2.0), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(psi(&p, &dv(&[0.5]), &dv(&[1.0]), 2.0), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(grad_psi(&p, &dv(&[0.5]), &dv(&[1.0]), 2.0)[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn dual_update_examples() {
        let j = DMatrix::from_element(1, 1, 1.0);
        let l = dual_update(&dv(&[1.0]), 10.0, &dv(&[0.2]), &j, &dv(&[-0.15]));
        assert_abs_diff_eq!(l[0], 1.5, epsilon = 1e-14);
        let l = dual_update(&dv(&[0.7]), 10.0, &dv(&[0.2]), &j, &dv(&[-0.2]));
        assert_eq!(l[0], 0.7);
        let l = dual_update(&dv(&[0.0, 0.0]), 2.0, &dv(&[1.0, -1.0]), &DMatrix::zeros(2, 3), &dv(&[1.0, 2.0, 3.0]));
        assert_eq!(l.as_slice(), &[2.0, -2.0]);
    }

    fn backtracking(init: f64) -> SolverConfig {
        SolverConfig {
            rho: 1.0,
            alpha: 0.5,
            beta: BetaPolicy::Backtracking { init, eta: 2.0, min: 1e-3, max: 1e6 },
            ..SolverConfig::default()
        }
    }

    fn linear_1d_data(beta: f64) -> SubproblemData {
        // f = x^2/2, F = x, x_k = 1: a nonzero step at any beta
        SubproblemData::new(dv(&[1.0]), dv(&[0.0]), dv(&[1.0]), DMatrix::from_element(1, 1, 1.0), 1.0, beta).unwrap()
    }

    #[test]
    fn backtracking_doubles_until_condition_holds() {
        // gap = rho/2 dx^2 needs (1 - alpha) beta / 2 >= 1/2, so beta >= 2
        let p = fixtures::half_square_identity_1d();
        let step = backtrack_beta(&p, &linear_1d_data(1.0), &backtracking(1.0), None).unwrap();
        assert_eq!(step.beta, 2.0);
        assert_eq!(step.trials, 2);
    }

    #[test]
    fn backtracking_accepts_large_initial_beta() {
        let p = fixtures::half_square_identity_1d();
        let step = backtrack_beta(&p, &linear_1d_data(4.0), &backtracking(4.0), None).unwrap();
        assert_eq!(step.beta, 4.0);
        assert_eq!(step.trials, 1);
    }

    #[test]
    fn backtracking_warm_start_halves_last_beta() {
        let p = fixtures::half_square_identity_1d();
        let step = backtrack_beta(&p, &linear_1d_data(1.0), &backtracking(1.0), Some(16.0)).unwrap();
        assert_eq!(step.beta, 8.0);
    }

    #[test]
    fn stationary_start_accepts_initial_beta() {
        let p = fixtures::half_square_identity_1d();
        let data =
            SubproblemData::new(dv(&[0.0]), dv(&[0.0]), dv(&[0.0]), DMatrix::from_element(1, 1, 1.0), 1.0, 0.5).unwrap();
        let step = backtrack_beta(&p, &data, &backtracking(0.5), None).unwrap();
        assert_eq!(step.beta, 0.5);
        assert_eq!(step.solution.x_next[0], 0.0);
    }

    #[test]
    fn backtracking_reports_unbounded_beta() {
        let p = fixtures::half_square_identity_1d();
        let mut cfg = backtracking(1.0);
        cfg.beta = BetaPolicy::Backtracking { init: 1.0, eta: 2.0, min: 1.0, max: 1.5 };
        let err = backtrack_beta(&p, &linear_1d_data(1.0), &cfg, None).unwrap_err();
        assert!(matches!(err, Error::BetaUnbounded { .. }));
    }

    #[test]
    fn linear_constraint_fixture_converges() {
        let p = fixtures::half_norm_linear();
        let r = solve(&p, &dv(&[0.0, 0.0]), &dv(&[0.0]), &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Converged);
        assert!(r.residual.feas_norm <= 1e-5);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && r.x[1].abs() < 1e-12);
        assert!((r.lambda[0] + 1.0).abs() < 1e-2);
        let st = model::stationarity(&p, &DVector::from_column_slice(&r.x), &DVector::from_column_slice(&r.lambda))
            .unwrap();
        assert!(st.max() <= 1e-3, "{st:?}");
    }

    fn unit_backtracking() -> BetaPolicy {
        BetaPolicy::Backtracking { init: 1.0, eta: 2.0, min: 1e-8, max: 1e12 }
    }

    #[test]
    fn sphere_fixture_reaches_minimizer() {
        let p = fixtures::sphere_linear();
        let cfg =
            SolverConfig { eps1: 1e-14, eps2: 1e-12, eps_stat: Some(1e-10), beta: unit_backtracking(), ..SolverConfig::default() };
        let r = solve(&p, &dv(&[1.0, 0.0]), &dv(&[0.0]), &cfg).unwrap();
        assert_eq!(r.status, Status::Converged, "{:?}", r.message);
        assert!(r.iterations <= 200, "{}", r.iterations);
        assert!((r.x[0] + 0.6).abs() < 1e-6 && (r.x[1] + 0.8).abs() < 1e-6, "{:?}", r.x);
        assert!((r.lambda[0] - 2.5).abs() < 1e-6, "{:?}", r.lambda);
    }

    #[test]
    fn sphere_maximizer_is_a_kkt_point() {
        // grad f is radial at (0.6, 0.8), so iterates stay on the ray through
        // the origin up to rounding and the run ends at the maximizer
        let p = fixtures::sphere_linear();
        let cfg = SolverConfig { beta: unit_backtracking(), ..SolverConfig::default() };
        let r = solve(&p, &dv(&[0.6, 0.8]), &dv(&[0.0]), &cfg).unwrap();
        assert_eq!(r.status, Status::Converged);
        assert!((r.x[0] - 0.6).abs() < 1e-4 && (r.x[1] - 0.8).abs() < 1e-4, "{:?}", r.x);
        assert!((r.lambda[0] + 2.5).abs() < 0.1, "{:?}", r.lambda);
    }

    #[test]
    fn constant_unit_beta_cycles_on_sphere() {
        // period-2 orbit: ||x||^2 = 8, lambda = 1, each step lands on the
        // zero set of the constraint linearized at the other point
        let p = fixtures::sphere_linear();
        let cfg = SolverConfig { max_iter: 300, ..SolverConfig::default() };
        let r = solve(&p, &dv(&[1.0, 0.0]), &dv(&[0.0]), &cfg).unwrap();
        assert_eq!(r.status, Status::MaxIter);
        let last = &r.trace[r.trace.len() - 1];
        let prev = &r.trace[r.trace.len() - 3];
        assert!((last.feas_norm - 7.0).abs() < 1e-6, "{}", last.feas_norm);
        assert!((last.lambda[0] - 1.0).abs() < 1e-6);
        assert!((last.x_vec() - prev.x_vec()).norm() < 1e-6);
    }

    #[test]
    fn every_record_satisfies_optimality_identity() {
        let p = fixtures::sphere_linear();
        let r = solve(&p, &dv(&[0.6, 0.8]), &dv(&[0.0]), &SolverConfig::default()).unwrap();
        for rec in &r.trace[1..] {
            let g = p.gradient(&rec.x_vec()).norm();
            assert!(rec.optimality_residual <= 1e-6 * (1.0 + g), "k = {}", rec.k);
        }
    }

    #[test]
    fn records_are_indexed_consecutively() {
        let p = fixtures::half_norm_linear();
        let r = solve(&p, &dv(&[3.0, -2.0]), &dv(&[0.0]), &SolverConfig::default()).unwrap();
        for (i, rec) in r.trace.iter().enumerate() {
            assert_eq!(rec.k, i);
        }
        assert_eq!(r.iterations + 1, r.trace.len());
    }

    #[test]
    fn max_iter_status() {
        let p = fixtures::sphere_linear();
        let cfg = SolverConfig { max_iter: 3, ..SolverConfig::default() };
        let r = solve(&p, &dv(&[1.0, 0.0]), &dv(&[0.0]), &cfg).unwrap();
        assert_eq!(r.status, Status::MaxIter);
        assert_eq!(r.iterations, 3);
    }

    #[test]
    fn indefinite_subproblem_is_a_failure_status() {
        let p = fixtures::concave_linear_1d();
        let r = solve(&p, &dv(&[0.3]), &dv(&[0.0]), &SolverConfig { rho: 0.5, ..SolverConfig::default() }).unwrap();
        assert_eq!(r.status, Status::SubproblemFailure);
        assert!(r.message.unwrap().contains("larger beta"));
    }

    #[test]
    fn auto_increase_beta_recovers() {
        let p = fixtures::concave_linear_1d();
        let cfg = SolverConfig { rho: 0.5, auto_increase_beta: true, ..SolverConfig::default() };
        let r = solve(&p, &dv(&[0.3]), &dv(&[0.0]), &cfg).unwrap();
        assert_ne!(r.status, Status::SubproblemFailure);
        assert!(r.trace[1].beta > 1.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let p = fixtures::half_norm_linear();
        let x0 = dv(&[0.0, 0.0]);
        let l0 = dv(&[0.0]);
        for cfg in [
            SolverConfig { rho: 0.0, ..SolverConfig::default() },
            SolverConfig { alpha: 1.0, ..SolverConfig::default() },
            SolverConfig { eps1: 0.0, ..SolverConfig::default() },
            SolverConfig { beta: BetaPolicy::Backtracking { init: 0.5, eta: 2.0, min: 1.0, max: 4.0 }, ..SolverConfig::default() },
            SolverConfig { record_theory: true, ..SolverConfig::default() },
        ] {
            assert!(solve(&p, &x0, &l0, &cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn nonquadratic_objective_uses_iterative_path() {
        let p = fixtures::quartic_linear_1d();
        let cfg = SolverConfig { eps1: 1e-14, eps2: 1e-12, eps_stat: Some(1e-8), ..SolverConfig::default() };
        let r = solve(&p, &dv(&[2.0]), &dv(&[0.0]), &cfg).unwrap();
        assert_eq!(r.status, Status::Converged);
        assert!(r.trace[1].inner_iters > 0);
        // KKT: x = 1, x^3 + lambda = 0
        assert!((r.x[0] - 1.0).abs() < 1e-6);
        assert!((r.lambda[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn solve_is_deterministic() {
        let p = fixtures::sphere_linear();
        let a = solve(&p, &dv(&[0.6, 0.8]), &dv(&[0.0]), &SolverConfig::default()).unwrap();
        let b = solve(&p, &dv(&[0.6, 0.8]), &dv(&[0.0]), &SolverConfig::default()).unwrap();
        let strip = |r: &RunReport| r.trace.iter().map(|t| IterationRecord { wall_time_s: 0.0, ..t.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }
}
