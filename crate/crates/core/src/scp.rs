//! Sequential convex programming baseline: each step minimizes
//! `f(x) + beta/2 ||x - x_k||^2` subject to `F(x_k) + J_k (x - x_k) = 0`.
//!
//! The returned multiplier follows the sign convention
//! `grad f + J^T lambda = 0`, matching [`crate::model::stationarity`].

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SymMatrix, DENSE_LIMIT};
use crate::model::{self, NlpOracle, StationarityResidual};
use crate::solver::{self, IterationRecord, RunReport, Status};
use crate::subproblem;

#[derive(Debug, Clone, PartialEq)]
pub struct ScpConfig {
    pub beta: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eps_stat: Option<f64>,
    pub max_iter: usize,
    /// Inner tolerance for non-quadratic objectives.
    pub inner_tol: f64,
    pub divergence_limit: f64,
}

impl Default for ScpConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eps1: 1e-3,
            eps2: 1e-5,
            eps_stat: None,
            max_iter: 10_000,
            inner_tol: subproblem::DEFAULT_INNER_TOL,
            divergence_limit: 1e12,
        }
    }
}

/// Relative residual bound on the saddle-point solve.
pub const SCP_TOLERANCE: f64 = 1e-8;
/// `J` counts as rank deficient when `sigma_min(J) <= RANK_TOL ||J||`.
pub const RANK_TOL: f64 = 1e-12;

fn check_rank(j: &DMatrix<f64>) -> Result<()> {
    let s = linalg::singular_values_wide(j);
    let smax = s.first().copied().unwrap_or(0.0);
    let smin = if s.len() < j.nrows() { 0.0 } else { s.last().copied().unwrap_or(0.0) };
    if smin <= RANK_TOL * smax || smax == 0.0 {
        return Err(Error::SingularKkt { sigma_min: smin });
    }
    Ok(())
}

/// Projector onto `null(J)` and the minimum-norm solution of `J d = r`,
/// both through a Cholesky factor of `J J^T`.
struct RangeSpace<'a> {
    j: &'a DMatrix<f64>,
    jjt: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> RangeSpace<'a> {
    fn new(j: &'a DMatrix<f64>) -> Result<Self> {
        let jjt = (j * j.transpose()).cholesky().ok_or(Error::SingularKkt { sigma_min: 0.0 })?;
        Ok(Self { j, jjt })
    }

    /// `J^T (J J^T)^{-1} r`.
    fn min_norm(&self, r: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(&self.jjt.solve(r))
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        v - self.min_norm(&(self.j * v))
    }

    /// Least-squares multiplier of `J^T lambda = -g`.
    fn multiplier(&self, g: &DVector<f64>) -> DVector<f64> {
        -self.jjt.solve(&(self.j * g))
    }
}

/// One SCP step for `f = 1/2 x^T Q x + p^T x`: solves
///
/// ```text
/// [Q + beta I  J^T] [x     ]   [beta x_k - p  ]
/// [J           0  ] [lambda] = [J x_k - F_k   ]
/// ```
pub fn scp_step(
    q: &SymMatrix,
    p: &DVector<f64>,
    x_k: &DVector<f64>,
    f_k: &DVector<f64>,
    j_k: &DMatrix<f64>,
    beta: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = x_k.len();
    let m = f_k.len();
    if q.dim() != n || p.len() != n || j_k.nrows() != m || j_k.ncols() != n {
        return Err(Error::Dimension(format!("scp_step: n = {n}, m = {m}, J is {}x{}", j_k.nrows(), j_k.ncols())));
    }
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be nonnegative, got {beta}")));
    }
    check_rank(j_k)?;

    let top = x_k * beta - p;
    let bottom = j_k * x_k - f_k;
    let rhs_norm = top.norm().hypot(bottom.norm());

    let (x, lambda) = if q.is_sparse() && n > DENSE_LIMIT {
        projected_cg_step(q, p, x_k, f_k, j_k, beta)?
    } else {
        let mut k = DMatrix::zeros(n + m, n + m);
        let mut h = DMatrix::zeros(n, n);
        q.add_to(&mut h);
        for i in 0..n {
            h[(i, i)] += beta;
        }
        k.view_mut((0, 0), (n, n)).copy_from(&h);
        k.view_mut((0, n), (n, m)).copy_from(&j_k.transpose());
        k.view_mut((n, 0), (m, n)).copy_from(j_k);
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&top);
        rhs.rows_mut(n, m).copy_from(&bottom);
        let lu = k.clone().lu();
        let mut sol = lu.solve(&rhs).ok_or(Error::SingularKkt { sigma_min: 0.0 })?;
        // one refinement pass
        let r = &rhs - &k * &sol;
        if let Some(corr) = lu.solve(&r) {
            sol += corr;
        }
        (sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned())
    };

    let r1 = q.mul_vec(&x) + &x * beta + j_k.tr_mul(&lambda) - &top;
    let r2 = j_k * &x - &bottom;
    let residual = r1.norm().hypot(r2.norm());
    let tolerance = SCP_TOLERANCE * (1.0 + rhs_norm);
    if !residual.is_finite() {
        return Err(Error::SingularKkt { sigma_min: 0.0 });
    }
    if residual > tolerance {
        return Err(Error::InaccurateSolve { residual, tolerance });
    }
    Ok((x, lambda))
}

/// Projected CG on the null space of `J` for large sparse `Q`.
fn projected_cg_step(
    q: &SymMatrix,
    p: &DVector<f64>,
    x_k: &DVector<f64>,
    f_k: &DVector<f64>,
    j_k: &DMatrix<f64>,
    beta: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = x_k.len();
    let rs = RangeSpace::new(j_k)?;
    let h = |v: &DVector<f64>| q.mul_vec(v) + v * beta;
    let g = q.mul_vec(x_k) + p;
    // feasible start, then CG on the reduced quadratic
    let mut d = rs.min_norm(&(-f_k));
    let mut r = rs.project(&(-(&g + h(&d))));
    let r0 = r.norm();
    let mut dir = r.clone();
    let mut rr = r.dot(&r);
    let max_it = 5 * n;
    let mut it = 0;
    while rr.sqrt() > 1e-13 * (1.0 + r0) && it < max_it {
        let hd = h(&dir);
        let curv = dir.dot(&hd);
        if !(curv > 0.0) {
            return Err(Error::NotPositiveDefinite { beta });
        }
        let a = rr / curv;
        d.axpy(a, &dir, 1.0);
        r = rs.project(&(&r - hd * a));
        let rr_new = r.dot(&r);
        dir = &r + dir * (rr_new / rr);
        rr = rr_new;
        it += 1;
    }
    let lambda = rs.multiplier(&(&g + h(&d)));
    Ok((x_k + d, lambda))
}

/// SCP step for a general smooth objective: accelerated projected gradient
/// on `f(x) + beta/2 ||x - x_k||^2` over the linearized feasible set.
pub fn scp_step_general(
    problem: &dyn NlpOracle,
    x_k: &DVector<f64>,
    f_k: &DVector<f64>,
    j_k: &DMatrix<f64>,
    beta: f64,
    tol: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_rank(j_k)?;
    let rs = RangeSpace::new(j_k)?;
    let phi = |x: &DVector<f64>| problem.objective(x) + 0.5 * beta * (x - x_k).norm_squared();
    let grad_full = |x: &DVector<f64>| problem.gradient(x) + (x - x_k) * beta;
    let start = x_k + rs.min_norm(&(-f_k));
    let max_inner = subproblem::default_max_inner(x_k.len());
    let projected = |x: &DVector<f64>| rs.project(&grad_full(x));
    let scale = |x: &DVector<f64>| problem.gradient(x).norm();
    let sol = subproblem::accelerated_descent(phi, projected, scale, start, beta, tol, max_inner)?;
    if !sol.converged {
        return Err(Error::InnerNotConverged { iterations: sol.inner_iters, residual: sol.kkt_residual });
    }
    let lambda = rs.multiplier(&grad_full(&sol.x_next));
    Ok((sol.x_next, lambda))
}

/// Runs SCP from `x0` with the shared stopping rule and trace schema.
/// Fields without an SCP meaning (`gamma`, `P`) stay empty, and the
/// Lagrangian columns use `rho = 0`.
pub fn scp_solve(problem: &dyn NlpOracle, x0: &DVector<f64>, config: &ScpConfig) -> Result<RunReport> {
    if !(config.beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {}", config.beta)));
    }
    if !(config.eps1 > 0.0 && config.eps2 > 0.0) {
        return Err(Error::Config("tolerances must be positive".into()));
    }
    let m = problem.num_constraints();
    let mut lambda = DVector::zeros(m);
    model::check_dims(problem, x0, &lambda)?;
    let start = Instant::now();
    let beta = config.beta;

    let mut x = x0.clone();
    let mut c = problem.constraints(&x);
    let mut jac = problem.jacobian(&x);
    let mut g = problem.gradient(&x);
    let mut trace = vec![record(0, &x, &lambda, beta, problem.objective(&x), &c, &g, &jac, 0.0, 0.0, 0.0, start.elapsed().as_secs_f64())];

    let mut status = Status::MaxIter;
    let mut message = None;
    let mut k = 0;
    let stop = |t: &[IterationRecord]| solver::stop_rule(config.eps1, config.eps2, config.eps_stat, t);
    if stop(&trace) {
        status = Status::Converged;
    }
    while status != Status::Converged && k < config.max_iter {
        let step = match problem.quadratic_objective() {
            Some((q, p)) => scp_step(q, p, &x, &c, &jac, beta),
            None => scp_step_general(problem, &x, &c, &jac, beta, config.inner_tol),
        };
        let (x_next, lambda_next) = match step {
            Ok(s) => s,
            Err(e) => {
                status = Status::SubproblemFailure;
                message = Some(e.to_string());
                break;
            }
        };
        k += 1;
        let c_next = problem.constraints(&x_next);
        let jac_next = problem.jacobian(&x_next);
        let g_next = problem.gradient(&x_next);
        let f_next = problem.objective(&x_next);
        let finite = f_next.is_finite()
            && c_next.iter().chain(g_next.iter()).chain(jac_next.iter()).chain(lambda_next.iter()).all(|v| v.is_finite());
        if !finite || x_next.norm() > config.divergence_limit || lambda_next.norm() > config.divergence_limit {
            status = Status::Diverged;
            message = Some(format!("iterate left the region |x|, |lambda| <= {:e} at k = {k}", config.divergence_limit));
            break;
        }
        let dx = &x_next - &x;
        let optimality = (&g_next + jac.tr_mul(&lambda_next) + &dx * beta).norm();
        trace.push(record(
            k,
            &x_next,
            &lambda_next,
            beta,
            f_next,
            &c_next,
            &g_next,
            &jac_next,
            dx.norm(),
            (&lambda_next - &lambda).norm(),
            optimality,
            start.elapsed().as_secs_f64(),
        ));
        x = x_next;
        lambda = lambda_next;
        c = c_next;
        jac = jac_next;
        g = g_next;
        if stop(&trace) {
            status = Status::Converged;
        }
    }
    Ok(RunReport {
        status,
        residual: StationarityResidual { grad_lag_norm: (&g + jac.tr_mul(&lambda)).norm(), feas_norm: c.norm() },
        x: x.iter().copied().collect(),
        lambda: lambda.iter().copied().collect(),
        iterations: k,
        trace,
        wall_time_s: start.elapsed().as_secs_f64(),
        rho: 0.0,
        message,
    })
}

#[allow(clippy::too_many_arguments)]
fn record(
    k: usize,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    beta: f64,
    f: f64,
    c: &DVector<f64>,
    g: &DVector<f64>,
    jac: &DMatrix<f64>,
    dx_norm: f64,
    dlambda_norm: f64,
    optimality_residual: f64,
    wall_time_s: f64,
) -> IterationRecord {
    IterationRecord {
        k,
        x: x.iter().copied().collect(),
        lambda: lambda.iter().copied().collect(),
        beta,
        f,
        feas_norm: c.norm(),
        grad_lag_x_norm: (g + jac.tr_mul(lambda)).norm(),
        grad_lag_lambda_norm: c.norm(),
        lagrangian: f + lambda.dot(c),
        gamma: None,
        p: None,
        dx_norm,
        dlambda_norm,
        descent_ok: true,
        descent_margin: 0.0,
        sigma_descent_ok: None,
        optimality_residual,
        inner_iters: 0,
        wall_time_s,
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
    fn linear_constraint_is_solved_in_one_step() {
        // without the proximal term the step is the exact KKT point from anywhere
        let p = fixtures::half_norm_linear();
        for x_k in [dv(&[0.0, 0.0]), dv(&[5.0, -3.0]), dv(&[-1.0, 0.25])] {
            let (x, l) = scp_step(&p.q, &p.p, &x_k, &p.constraints(&x_k), &p.jacobian(&x_k), 0.0).unwrap();
            assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(l[0], -1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn proximal_step_on_linear_constraint() {
        // min 1/2 |x|^2 + 1/2 |x - x_k|^2 s.t. x_1 = 1: x_2 = x_k2 / 2, lambda = x_k1 - 2
        let p = fixtures::half_norm_linear();
        let x_k = dv(&[5.0, -3.0]);
        let (x, l) = scp_step(&p.q, &p.p, &x_k, &p.constraints(&x_k), &p.jacobian(&x_k), 1.0).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], -1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(l[0], 3.0, epsilon = 1e-12);
        let origin = dv(&[0.0, 0.0]);
        let (x, _) = scp_step(&p.q, &p.p, &origin, &p.constraints(&origin), &p.jacobian(&origin), 1.0).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn hand_kkt_with_zero_beta() {
        let q = SymMatrix::dense(DMatrix::from_element(1, 1, 2.0));
        let (x, l) = scp_step(&q, &dv(&[0.0]), &dv(&[1.0]), &dv(&[0.0]), &DMatrix::from_element(1, 1, 1.0), 0.0).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l[0], -2.0, epsilon = 1e-14);
    }

    #[test]
    fn stationary_start_is_a_fixed_point() {
        let p = fixtures::sphere_linear();
        let x = dv(&[-0.6, -0.8]);
        let (x1, l1) = scp_step(&p.q, &p.p, &x, &p.constraints(&x), &p.jacobian(&x), 1.0).unwrap();
        assert!((x1 - &x).norm() < 1e-12);
        assert_abs_diff_eq!(l1[0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn duplicate_rows_are_singular() {
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = scp_step(&SymMatrix::identity(2), &dv(&[0.0, 0.0]), &dv(&[0.0, 0.0]), &dv(&[1.0, 1.0]), &j, 1.0)
            .unwrap_err();
        assert!(matches!(err, Error::SingularKkt { .. }), "{err}");
    }

    #[test]
    fn sparse_path_matches_dense() {
        use crate::linalg::CsrMatrix;
        let n = DENSE_LIMIT + 3;
        let idx: Vec<usize> = (0..n).collect();
        let vals: Vec<f64> = (0..n).map(|i| 1.0 + (i % 4) as f64).collect();
        let q = SymMatrix::sparse(CsrMatrix::from_triplets(n, &idx, &idx, &vals));
        let p = DVector::from_fn(n, |i, _| ((i % 9) as f64 - 4.0) * 0.1);
        let x_k = DVector::from_fn(n, |i, _| if i % 2 == 0 { 0.1 } else { -0.2 });
        let mut j = DMatrix::zeros(2, n);
        j[(0, 0)] = 1.0;
        j[(0, 5)] = 2.0;
        j[(1, 7)] = -1.0;
        j[(1, n - 1)] = 0.5;
        let f_k = dv(&[0.3, -0.4]);
        let (xs, ls) = scp_step(&q, &p, &x_k, &f_k, &j, 1.0).unwrap();
        let (xd, ld) = scp_step(&SymMatrix::Dense(q.to_dense()), &p, &x_k, &f_k, &j, 1.0).unwrap();
        assert!((xs - xd).norm() < 1e-9);
        assert!((ls - ld).norm() < 1e-9);
    }

    #[test]
    fn sphere_run_reaches_minimizer() {
        // beta = 1 falls into a period-2 orbit here; the tangential error is
        // multiplied by 1 - 2 lambda* / beta per step, so beta > 2.5 is needed
        let p = fixtures::sphere_linear();
        let r = scp_solve(&p, &dv(&[1.0, 0.0]), &ScpConfig { beta: 5.0, ..ScpConfig::default() }).unwrap();
        assert_eq!(r.status, Status::Converged, "{:?}", r.message);
        assert!(r.residual.feas_norm <= 1e-5);
        assert!((r.x[0] + 0.6).abs() < 1e-4 && (r.x[1] + 0.8).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn linear_constraint_run_converges_quickly() {
        let p = fixtures::half_norm_linear();
        let r = scp_solve(&p, &dv(&[0.0, 0.0]), &ScpConfig::default()).unwrap();
        assert_eq!(r.status, Status::Converged);
        // the first step lands on the solution; the objective-change test needs one more record
        assert_eq!(&r.trace[1].x, &[1.0, 0.0]);
        assert_eq!(r.iterations, 2);
    }

    #[test]
    fn linearized_feasibility_holds_each_step() {
        let p = fixtures::sphere_linear();
        let r = scp_solve(&p, &dv(&[0.9, -0.1]), &ScpConfig::default()).unwrap();
        for w in r.trace.windows(2) {
            let (a, b) = (w[0].x_vec(), w[1].x_vec());
            let lin = p.jacobian(&a) * (&b - &a) + p.constraints(&a);
            assert!(lin.norm() <= 1e-8 * (1.0 + p.constraints(&a).norm()));
        }
    }

    #[test]
    fn general_objective_step() {
        let p = fixtures::quartic_linear_1d();
        let r = scp_solve(&p, &dv(&[3.0]), &ScpConfig::default()).unwrap();
        assert_eq!(r.status, Status::Converged);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.lambda[0], -1.0, epsilon = 1e-6);
    }
}
