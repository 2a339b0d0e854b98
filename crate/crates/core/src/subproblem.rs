//! The proximal linearized augmented-Lagrangian step
//!
//! ```text
//! phi(x) = f(x) + <lambda_k, F_k + J_k (x - x_k)>
//!        + rho/2 ||F_k + J_k (x - x_k)||^2 + beta/2 ||x - x_k||^2
//! ```
//!
//! solved exactly by one linear solve when `f` is quadratic, and by a
//! monotone accelerated gradient method otherwise.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SymMatrix, DENSE_LIMIT};
use crate::model::NlpOracle;

/// Everything the step needs about the current outer iterate.
#[derive(Debug, Clone)]
pub struct SubproblemData {
    pub x_k: DVector<f64>,
    pub lambda_k: DVector<f64>,
    /// `F(x_k)`.
    pub f_k: DVector<f64>,
    /// `grad F(x_k)`, `m x n`.
    pub j_k: DMatrix<f64>,
    pub rho: f64,
    pub beta: f64,
}

impl SubproblemData {
    pub fn new(
        x_k: DVector<f64>,
        lambda_k: DVector<f64>,
        f_k: DVector<f64>,
        j_k: DMatrix<f64>,
        rho: f64,
        beta: f64,
    ) -> Result<Self> {
        let data = Self { x_k, lambda_k, f_k, j_k, rho, beta };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.x_k.len(), self.lambda_k.len());
        if self.f_k.len() != m || self.j_k.nrows() != m || self.j_k.ncols() != n {
            return Err(Error::Dimension(format!(
                "x_k in R^{n}, lambda_k in R^{m}, F_k in R^{}, J_k is {}x{}",
                self.f_k.len(),
                self.j_k.nrows(),
                self.j_k.ncols()
            )));
        }
        if !(self.rho > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config(format!("need rho > 0 and beta > 0, got {} and {}", self.rho, self.beta)));
        }
        Ok(())
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..self.clone() }
    }

    /// `F_k + J_k d`, the linearized constraint at `x_k + d`.
    pub fn linearized(&self, d: &DVector<f64>) -> DVector<f64> {
        &self.f_k + &self.j_k * d
    }

    /// Model value minus `f`: the linearized penalty and proximal terms.
    pub fn model_terms(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.x_k;
        let lin = self.linearized(&d);
        self.lambda_k.dot(&lin) + 0.5 * self.rho * lin.norm_squared() + 0.5 * self.beta * d.norm_squared()
    }

    /// Gradient of [`Self::model_terms`].
    pub fn model_terms_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = x - &self.x_k;
        let w = &self.lambda_k + self.linearized(&d) * self.rho;
        self.j_k.tr_mul(&w) + d * self.beta
    }
}

#[derive(Debug, Clone)]
pub struct SubproblemSolution {
    pub x_next: DVector<f64>,
    /// Direct path: `||H x_next - rhs||`. Iterative path: `||grad phi(x_next)||`.
    pub kkt_residual: f64,
    pub inner_iters: usize,
    /// False when the iterative path hit `max_inner` first.
    pub converged: bool,
}

/// Relative accuracy demanded of the direct linear solve.
pub const DIRECT_TOLERANCE: f64 = 1e-8;

/// Solves `(Q + rho J^T J + beta I) x = rhs` with
/// `rhs = -p - J^T lambda - rho J^T F_k + rho J^T J x_k + beta x_k`.
///
/// The system is solved for the step `x - x_k`, which keeps the right-hand
/// side small near convergence. Dense problems use a Cholesky factorization;
/// sparse `Q` above the densification limit uses matrix-free CG.
pub fn solve_direct(q: &SymMatrix, p: &DVector<f64>, data: &SubproblemData) -> Result<SubproblemSolution> {
    data.validate()?;
    let n = data.x_k.len();
    if q.dim() != n || p.len() != n {
        return Err(Error::Dimension(format!("objective is {} dimensional, x_k has length {n}", q.dim())));
    }
    let (rho, beta) = (data.rho, data.beta);
    let j = &data.j_k;
    let rhs = {
        let jx = j * &data.x_k;
        let inner = &jx * rho - &data.f_k * rho - &data.lambda_k;
        j.tr_mul(&inner) - p + &data.x_k * beta
    };
    // H x_k - rhs, the gradient of phi at x_k
    let g = q.mul_vec(&data.x_k) + p + j.tr_mul(&(&data.lambda_k + &data.f_k * rho));
    let tolerance = DIRECT_TOLERANCE * (1.0 + rhs.norm());

    let apply = |v: &DVector<f64>| q.mul_vec(v) + j.tr_mul(&(j * v)) * rho + v * beta;

    let (x_next, iters) = if q.is_sparse() && n > DENSE_LIMIT {
        let max_cg = 5 * n;
        let rel = (0.1 * tolerance / g.norm().max(f64::MIN_POSITIVE)).clamp(1e-14, 1e-2);
        let cg = linalg::conjugate_gradient(&apply, &(-&g), rel, max_cg);
        // early exit without convergence means non-positive curvature
        if !cg.converged && cg.iterations < max_cg {
            return Err(Error::NotPositiveDefinite { beta });
        }
        (&data.x_k + cg.x, cg.iterations)
    } else {
        let mut h = j.tr_mul(j) * rho;
        q.add_to(&mut h);
        for i in 0..n {
            h[(i, i)] += beta;
        }
        let chol = h.clone().cholesky().ok_or(Error::NotPositiveDefinite { beta })?;
        let mut step = chol.solve(&(-&g));
        // one refinement pass against the full system
        let r = -&g - &h * &step;
        step += chol.solve(&r);
        (&data.x_k + step, 1)
    };

    let residual = (apply(&x_next) - &rhs).norm();
    if !residual.is_finite() {
        return Err(Error::NonFinite { what: "subproblem solution", point: data.x_k.iter().copied().collect() });
    }
    if residual > tolerance {
        return Err(Error::InaccurateSolve { residual, tolerance });
    }
    Ok(SubproblemSolution { x_next, kkt_residual: residual, inner_iters: iters, converged: true })
}

/// Default inner tolerance for [`solve_iterative`].
pub const DEFAULT_INNER_TOL: f64 = 1e-8;

/// Default inner iteration cap for dimension `n`.
pub fn default_max_inner(n: usize) -> usize {
    (10 * n).max(5000)
}

/// Minimizes `phi` by accelerated gradient descent with a backtracking
/// Lipschitz estimate, a monotone safeguard and restart on non-descent.
///
/// Stops once `||grad phi(x)|| <= tol (1 + min(||grad phi(x_k)||, ||grad f(x)||))`.
/// The second scale bounds the residual of the optimality identity at the
/// returned point. That point never has a larger `phi` than `x_k`.
pub fn solve_iterative(
    problem: &dyn NlpOracle,
    data: &SubproblemData,
    tol: f64,
    max_inner: usize,
) -> Result<SubproblemSolution> {
    data.validate()?;
    if data.x_k.len() != problem.dim() || data.lambda_k.len() != problem.num_constraints() {
        return Err(Error::Dimension("subproblem data does not match the problem".into()));
    }
    let phi = |x: &DVector<f64>| problem.objective(x) + data.model_terms(x);
    let grad = |x: &DVector<f64>| problem.gradient(x) + data.model_terms_gradient(x);
    // the model terms are beta-strongly convex, so beta bounds the gradient
    // Lipschitz constant of phi from below
    let scale = |x: &DVector<f64>| problem.gradient(x).norm();
    accelerated_descent(phi, grad, scale, data.x_k.clone(), data.beta, tol, max_inner)
}

/// Monotone accelerated gradient descent with backtracking on the Lipschitz
/// estimate (doubling from `lip0`) and restart whenever the extrapolated step
/// fails to decrease `phi`.
///
/// Function values near a minimizer differ by less than their rounding error,
/// so a trial step is also accepted when the gradient change along it is
/// within the current estimate, and decreases are judged up to a few ulps.
///
/// `grad` may return a projected gradient; the iterates then stay on the
/// affine set through `x0` spanned by the projection's range. The stop test
/// is `||grad(x)|| <= tol (1 + min(||grad(x0)||, scale(x)))`.
pub(crate) fn accelerated_descent(
    phi: impl Fn(&DVector<f64>) -> f64,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    scale: impl Fn(&DVector<f64>) -> f64,
    x0: DVector<f64>,
    lip0: f64,
    tol: f64,
    max_inner: usize,
) -> Result<SubproblemSolution> {
    let finite = |what: &'static str, v: f64, x: &DVector<f64>| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { what, point: x.iter().copied().collect() })
        }
    };
    let slack = |f: f64| 64.0 * f64::EPSILON * (1.0 + f.abs());

    let mut x = x0;
    let mut fx = finite("subproblem objective", phi(&x), &x)?;
    let mut gx = grad(&x);
    let g0 = finite("subproblem gradient", gx.norm(), &x)?;
    let done = |g: f64, x: &DVector<f64>| g <= tol * (1.0 + g0) && g <= tol * (1.0 + scale(x));
    if done(g0, &x) {
        return Ok(SubproblemSolution { x_next: x, kkt_residual: g0, inner_iters: 0, converged: true });
    }

    let mut lip = lip0.max(f64::MIN_POSITIVE);
    let mut y = x.clone();
    let mut fy = fx;
    let mut gy = gx.clone();
    let mut t = 1.0_f64;
    let mut gnorm = g0;

    for it in 1..=max_inner {
        // backtracking on the quadratic upper model at y
        let (z, fz, gz) = loop {
            let z = &y - &gy / lip;
            let fz = phi(&z);
            let gz = grad(&z);
            let d = &z - &y;
            let dd = d.norm_squared();
            let model_ok = fz <= fy + gy.dot(&d) + 0.5 * lip * dd + slack(fy);
            let curvature_ok = (&gz - &gy).dot(&d) <= lip * dd;
            if fz.is_finite() && gz.iter().all(|v| v.is_finite()) && (model_ok || curvature_ok) {
                break (z, fz, gz);
            }
            lip *= 2.0;
            if !lip.is_finite() {
                return Err(Error::NonFinite { what: "subproblem line search", point: y.iter().copied().collect() });
            }
        };

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if fz <= fx + slack(fx) {
            let x_prev = std::mem::replace(&mut x, z);
            fx = fz;
            gx = gz;
            y = &x + (&x - &x_prev) * ((t - 1.0) / t_next);
            t = t_next;
        } else {
            // t == 1 means y was already x: the step itself is too long
            if t == 1.0 {
                lip *= 2.0;
            }
            y = x.clone();
            t = 1.0;
        }
        gnorm = gx.norm();
        if done(gnorm, &x) {
            return Ok(SubproblemSolution { x_next: x, kkt_residual: gnorm, inner_iters: it, converged: true });
        }
        if t == 1.0 {
            fy = fx;
            gy = gx.clone();
        } else {
            fy = phi(&y);
            gy = grad(&y);
        }
    }
    log::debug!("inner solver stopped at max_inner = {max_inner} with gradient norm {gnorm:e}");
    Ok(SubproblemSolution { x_next: x, kkt_residual: gnorm, inner_iters: max_inner, converged: false })
}
