//! Closed-form parameters of the convergence analysis and inequality checks
//! evaluated on recorded traces.
//!
//! Notation: `M_f, L_f` bound `||grad f||` and its Lipschitz constant,
//! `M_F, L_F` the same for the constraint Jacobian (fields `m_jac`, `l_jac`),
//! `sigma` bounds the smallest singular value of the Jacobian from below.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{InstanceConstants, NlpOracle};
use crate::solver::IterationRecord;

/// Relative slack on every inequality check.
pub const CHECK_REL_SLACK: f64 = 1e-6;
/// Absolute slack on every inequality check.
pub const CHECK_ABS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryParams {
    /// Exponent `eta > 1` in the `rho` bound and `gamma_k`.
    pub eta: f64,
    pub delta: f64,
    /// `None` when the small-beta interval is empty and its term is dropped.
    pub delta_prime: Option<f64>,
    pub alpha: f64,
}

impl Default for TheoryParams {
    fn default() -> Self {
        Self { eta: 2.0, delta: 2.0, delta_prime: Some(2.0), alpha: 0.5 }
    }
}

impl TheoryParams {
    /// `delta` is the smallest value `>= 2` with `beta_bar_1 >= beta_max`;
    /// `delta'` places `beta_bar_2` at `(L_f sigma - M_f L_F) / (2 M_F)`.
    /// `beta_bar_2 >= L_f` for every `delta' >= 1`, so when that target is
    /// below `L_f` the small-beta case is empty and `delta'` is `None`.
    pub fn automatic(c: &InstanceConstants, alpha: f64, beta_max: f64, eta: f64) -> Self {
        let (m_f, l_f, m_jac, l_jac, s) = unpack(c);
        let k = m_f * l_jac / (2.0 * m_jac + s);
        let delta = if k > 0.0 { delta_for_upper_root(beta_max / k).max(2.0) } else { 2.0 };
        let target = (l_f * s - m_f * l_jac) / (2.0 * m_jac);
        let delta_prime = (l_f > 0.0 && target >= l_f).then(|| delta_for_upper_root(target / l_f));
        Self { eta, delta, delta_prime, alpha }
    }
}

/// Solves `d (1 + sqrt(1 - 1/d^2)) = t` for `d >= 1`.
fn delta_for_upper_root(t: f64) -> f64 {
    ((t * t + 1.0) / (2.0 * t)).max(1.0)
}

fn root_pair(delta: f64, scale: f64) -> (f64, f64) {
    let r = (1.0 - 1.0 / (delta * delta)).max(0.0).sqrt();
    (delta * (1.0 - r) * scale, delta * (1.0 + r) * scale)
}

/// Admissible `beta` interval `[beta_low_1, beta_bar_1]` for the large-beta case.
pub fn beta_interval_large(c: &InstanceConstants, delta: f64) -> (f64, f64) {
    let (m_f, _, m_jac, l_jac, s) = unpack(c);
    root_pair(delta, m_f * l_jac / (2.0 * m_jac + s))
}

/// Admissible `beta` interval `[beta_low_2, beta_bar_2]` for the small-beta case.
pub fn beta_interval_small(c: &InstanceConstants, delta_prime: f64) -> (f64, f64) {
    root_pair(delta_prime, c.l_f.value)
}

fn unpack(c: &InstanceConstants) -> (f64, f64, f64, f64, f64) {
    (c.m_f.value, c.l_f.value, c.m_jac.value, c.l_jac.value, c.sigma.value)
}

/// `2 (L_f + beta)^2 / sigma^2`.
pub fn c1(beta: f64, l_f: f64, sigma: f64) -> f64 {
    2.0 * (l_f + beta).powi(2) / (sigma * sigma)
}

/// `2 (M_f L_F + (2 M_F + sigma) beta)^2 / sigma^4`.
pub fn c2(beta: f64, m_f: f64, l_jac: f64, m_jac: f64, sigma: f64) -> f64 {
    2.0 * (m_f * l_jac + (2.0 * m_jac + sigma) * beta).powi(2) / sigma.powi(4)
}

/// `1 / (2 rho^((eta-1)/eta)) + 1 / rho`.
fn rho_factor(rho: f64, eta: f64) -> f64 {
    0.5 / rho.powf((eta - 1.0) / eta) + 1.0 / rho
}

/// `gamma = 4 (1/(2 rho^((eta-1)/eta)) + 1/rho) max(c1(beta), c2(beta))`.
pub fn gamma_k(beta: f64, rho: f64, eta: f64, c: &InstanceConstants) -> f64 {
    let (m_f, l_f, m_jac, l_jac, s) = unpack(c);
    gamma_from_cmax(rho, eta, c1(beta, l_f, s).max(c2(beta, m_f, l_jac, m_jac, s)))
}

pub fn gamma_from_cmax(rho: f64, eta: f64, c_max: f64) -> f64 {
    4.0 * rho_factor(rho, eta) * c_max
}

/// Smallest `rho` covered by the convergence analysis.
///
/// `d_s` is the diameter of the level set containing the iterates.
pub fn rho_lower_bound(c: &InstanceConstants, params: &TheoryParams, d_s: Option<f64>) -> Result<f64> {
    let mut missing = Vec::new();
    for (name, v) in [
        ("M_f", c.m_f.value),
        ("L_f", c.l_f.value),
        ("M_F", c.m_jac.value),
        ("L_F", c.l_jac.value),
        ("sigma", c.sigma.value),
        ("rho0", c.rho0.value),
    ] {
        if !v.is_finite() {
            missing.push(name);
        }
    }
    if d_s.is_none_or(|d| !d.is_finite()) {
        missing.push("D_S");
    }
    if !missing.is_empty() {
        return Err(Error::MissingConstants(missing.join(", ")));
    }
    let d_s = d_s.unwrap_or_default();
    let (m_f, l_f, m_jac, l_jac, s) = unpack(c);
    if !(s > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {s}")));
    }
    let TheoryParams { eta, delta, delta_prime, alpha } = *params;
    let rho0 = c.rho0.value;
    let e = eta / (eta - 1.0);
    let mut terms = vec![
        (4.0 * m_jac * m_jac / (s * s)).powf(eta),
        (48.0 * (delta + 1.0) * (2.0 * m_jac + s) * m_f * l_jac / (alpha * s.powi(4))).powf(e),
        3.0 * rho0,
        rho0 + ((m_f * (2.0 * m_jac + s) + 2.0 * delta * m_f * l_jac * d_s)
            / (std::f64::consts::SQRT_2 * s * (2.0 * m_jac + s)))
            .powi(2),
    ];
    if let Some(dp) = delta_prime {
        terms.push((48.0 * (dp + 1.0) * l_f / (alpha * s * s)).powf(e));
    }
    Ok(terms.into_iter().fold(0.0, f64::max))
}

/// `Gamma(beta) = (M_F + 1/rho)(M_f L_F + M_F L_f + (3 M_F + sigma) beta) / sigma^2 + 2 M_F (rho M_F + 1)`.
pub fn gamma_of_beta(beta: f64, rho: f64, c: &InstanceConstants) -> f64 {
    let (m_f, l_f, m_jac, l_jac, s) = unpack(c);
    (m_jac + 1.0 / rho) * (m_f * l_jac + m_jac * l_f + (3.0 * m_jac + s) * beta) / (s * s)
        + 2.0 * m_jac * (rho * m_jac + 1.0)
}

/// Largest `Gamma(beta_k)` over a trace.
pub fn gamma_max(trace: &[IterationRecord], rho: f64, c: &InstanceConstants) -> f64 {
    trace.iter().map(|r| gamma_of_beta(r.beta, rho, c)).fold(0.0, f64::max)
}

/// `max_i L_F ||lambda_i + rho F(x_i)|| + M_F (2 + rho M_F)` over given norms.
pub fn lpsi_bound_from_norms(multiplier_norms: &[f64], rho: f64, l_jac: f64, m_jac: f64) -> Result<f64> {
    if multiplier_norms.is_empty() {
        return Err(Error::Config("lpsi_bound needs at least one point".into()));
    }
    let w = multiplier_norms.iter().copied().fold(0.0, f64::max);
    Ok(l_jac * w + m_jac * (2.0 + rho * m_jac))
}

/// Smoothness constant of `psi(., lambda)` over the supplied `(x, lambda)` pairs.
pub fn lpsi_bound(
    problem: &dyn NlpOracle,
    points: &[(DVector<f64>, DVector<f64>)],
    rho: f64,
    c: &InstanceConstants,
) -> Result<f64> {
    let norms: Vec<f64> = points.iter().map(|(x, l)| (l + problem.constraints(x) * rho).norm()).collect();
    lpsi_bound_from_norms(&norms, rho, c.l_jac.value, c.m_jac.value)
}

/// `4 U_bar + 4 c0 - 3 L_bar + 8 ||lambda0||^2 + 3`.
pub fn alpha_hat(u_bar: f64, c0: f64, l_bar: f64, lambda0: &DVector<f64>) -> f64 {
    4.0 * u_bar + 4.0 * c0 - 3.0 * l_bar + 8.0 * lambda0.norm_squared() + 3.0
}

/// Largest distance between any two recorded iterates.
pub fn trajectory_diameter(trace: &[IterationRecord]) -> f64 {
    let xs: Vec<DVector<f64>> = trace.iter().map(|r| r.x_vec()).collect();
    let mut d: f64 = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            d = d.max((&xs[i] - &xs[j]).norm());
        }
    }
    d
}

/// One evaluated inequality `lhs <= rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub k: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// Allowed value minus `lhs`; negative on violation.
    pub margin: f64,
    pub ok: bool,
}

impl CheckOutcome {
    /// Applies the relative slack, the absolute floor and an optional
    /// rounding allowance for quantities formed as differences.
    pub fn new(k: usize, lhs: f64, rhs: f64, rounding: f64) -> Self {
        let allowed = rhs + CHECK_REL_SLACK * rhs.abs() + CHECK_ABS_FLOOR + rounding;
        let margin = allowed - lhs;
        Self { k, lhs, rhs, margin, ok: margin >= 0.0 }
    }

    /// Strict form: `lhs <= rhs + abs_tol`.
    pub fn exact(k: usize, lhs: f64, rhs: f64, abs_tol: f64) -> Self {
        let margin = rhs + abs_tol - lhs;
        Self { k, lhs, rhs, margin, ok: margin >= 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub total: usize,
    pub passed: usize,
    /// Smallest margin, `+inf` when nothing was checked.
    pub worst_margin: f64,
}

impl CheckSummary {
    pub fn from_outcomes(name: &str, outcomes: &[CheckOutcome]) -> Self {
        Self {
            name: name.to_string(),
            total: outcomes.len(),
            passed: outcomes.iter().filter(|o| o.ok).count(),
            worst_margin: outcomes.iter().map(|o| o.margin).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn pass_rate(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.passed as f64 / self.total as f64
        }
    }

    pub fn all_passed(&self) -> bool {
        self.passed == self.total
    }
}

/// Where `gamma_k` comes from in the Lyapunov sequence.
#[derive(Debug, Clone)]
pub enum GammaPolicy<'a> {
    Formula { constants: &'a InstanceConstants, eta: f64 },
    /// One value per record.
    Supplied(&'a [f64]),
}

/// Inputs of `P_k = L_rho(x_k, lambda_k) + gamma_k/2 ||x_k - x_{k-1}||^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovInput {
    pub lagrangian: f64,
    pub gamma: f64,
    pub dx_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovRecord {
    pub k: usize,
    pub gamma: f64,
    pub p: f64,
    /// `P_{k+1} - P_k`; absent for the last record.
    pub delta_p: Option<f64>,
    /// `-gamma_{k+1}/4 ||dx_{k+1}||^2 - gamma_k/4 ||dx_k||^2`.
    pub certified_decrease_bound: Option<f64>,
    /// Decrease check, evaluated for `k >= 1`.
    pub decrease: Option<CheckOutcome>,
    /// `P_k >= L_bar - 1`, when `L_bar` is known.
    pub lower_bound_ok: Option<bool>,
}

/// Lyapunov values and checks from raw inputs; element `i` is iteration `i`.
pub fn lyapunov_sequence(inputs: &[LyapunovInput], l_bar: Option<f64>) -> Result<Vec<LyapunovRecord>> {
    if inputs.len() < 2 {
        return Err(Error::Config("a Lyapunov sequence needs at least two iterations".into()));
    }
    let p: Vec<f64> = inputs.iter().map(|i| i.lagrangian + 0.5 * i.gamma * i.dx_norm * i.dx_norm).collect();
    let mut out = Vec::with_capacity(inputs.len());
    for (k, inp) in inputs.iter().enumerate() {
        let (delta_p, bound, decrease) = if k + 1 < inputs.len() {
            let nxt = &inputs[k + 1];
            let dp = p[k + 1] - p[k];
            let bound = -0.25 * nxt.gamma * nxt.dx_norm.powi(2) - 0.25 * inp.gamma * inp.dx_norm.powi(2);
            let rounding = 8.0 * f64::EPSILON * (p[k].abs() + p[k + 1].abs());
            let check = (k >= 1).then(|| CheckOutcome::new(k, dp, bound, rounding));
            (Some(dp), Some(bound), check)
        } else {
            (None, None, None)
        };
        out.push(LyapunovRecord {
            k,
            gamma: inp.gamma,
            p: p[k],
            delta_p,
            certified_decrease_bound: bound,
            decrease,
            lower_bound_ok: l_bar.map(|lb| p[k] >= lb - 1.0),
        });
    }
    Ok(out)
}

/// Lyapunov sequence of a recorded run.
pub fn lyapunov_trace(trace: &[IterationRecord], gamma: GammaPolicy<'_>, rho: f64, l_bar: Option<f64>) -> Result<Vec<LyapunovRecord>> {
    let gammas: Vec<f64> = match gamma {
        GammaPolicy::Formula { constants, eta } => trace.iter().map(|r| gamma_k(r.beta, rho, eta, constants)).collect(),
        GammaPolicy::Supplied(g) => {
            if g.len() != trace.len() {
                return Err(Error::Dimension(format!("{} gamma values for {} records", g.len(), trace.len())));
            }
            g.to_vec()
        }
    };
    let inputs: Vec<LyapunovInput> = trace
        .iter()
        .zip(&gammas)
        .map(|(r, &g)| LyapunovInput { lagrangian: r.lagrangian, gamma: g, dx_norm: r.dx_norm })
        .collect();
    lyapunov_sequence(&inputs, l_bar)
}

/// Dual-increment bound in linear and squared form, per `k >= 1`:
///
/// ```text
/// ||dl_{k+1}||   <= (L_f + b_{k+1})/s ||dx_{k+1}|| + (M_f L_F + (2 M_F + s) b_k)/s^2 ||dx_k||
/// ||dl_{k+1}||^2 <= c1(b_{k+1}) ||dx_{k+1}||^2 + c2(b_k) ||dx_k||^2
/// ```
pub fn check_dual_increment(trace: &[IterationRecord], c: &InstanceConstants) -> (Vec<CheckOutcome>, Vec<CheckOutcome>) {
    let (m_f, l_f, m_jac, l_jac, s) = unpack(c);
    let mut linear = Vec::new();
    let mut squared = Vec::new();
    for k in 1..trace.len().saturating_sub(1) {
        let (cur, nxt) = (&trace[k], &trace[k + 1]);
        let lhs = nxt.dlambda_norm;
        let rhs = (l_f + nxt.beta) / s * nxt.dx_norm + (m_f * l_jac + (2.0 * m_jac + s) * cur.beta) / (s * s) * cur.dx_norm;
        linear.push(CheckOutcome::new(k, lhs, rhs, 0.0));
        let rhs2 = c1(nxt.beta, l_f, s) * nxt.dx_norm.powi(2) + c2(cur.beta, m_f, l_jac, m_jac, s) * cur.dx_norm.powi(2);
        squared.push(CheckOutcome::new(k, lhs * lhs, rhs2, 0.0));
    }
    (linear, squared)
}

/// Gradient bounds per `k >= 1`:
///
/// ```text
/// ||grad L_rho(z_{k+1})|| <= Gamma(b_{k+1}) ||dx_{k+1}|| + Gamma(b_k) ||dx_k||
/// ||grad P(u_{k+1})||     <= (Gamma_max + D_S + 2 gamma_bar)(||dx_{k+1}|| + ||dx_k||)
/// ```
///
/// `grad P` is assembled from its blocks at `(x_{k+1}, lambda_{k+1}, x_k, gamma_{k+1})`.
pub fn check_gradient_bound(
    problem: &dyn NlpOracle,
    trace: &[IterationRecord],
    rho: f64,
    eta: f64,
    c: &InstanceConstants,
    d_s: Option<f64>,
) -> Result<(Vec<CheckOutcome>, Vec<CheckOutcome>)> {
    if trace.len() < 3 {
        return Err(Error::Config("gradient bound checks need at least three records".into()));
    }
    let d_s = d_s.unwrap_or_else(|| trajectory_diameter(trace));
    let gammas: Vec<f64> = trace.iter().map(|r| gamma_k(r.beta, rho, eta, c)).collect();
    let gamma_bar = gammas[1..].iter().copied().fold(0.0, f64::max);
    let big_gamma_max = gamma_max(&trace[1..], rho, c);
    let mut lag = Vec::new();
    let mut lyap = Vec::new();
    for k in 1..trace.len() - 1 {
        let (cur, nxt) = (&trace[k], &trace[k + 1]);
        let blocks = lyapunov_gradient_blocks(problem, nxt, cur, gammas[k + 1], rho);
        let steps = nxt.dx_norm + cur.dx_norm;

        let rhs = gamma_of_beta(nxt.beta, rho, c) * nxt.dx_norm + gamma_of_beta(cur.beta, rho, c) * cur.dx_norm;
        lag.push(CheckOutcome::new(k, blocks.grad_lagrangian_norm, rhs, 0.0));
        let rhs = (big_gamma_max + d_s + 2.0 * gamma_bar) * steps;
        lyap.push(CheckOutcome::new(k, blocks.norm(), rhs, 0.0));
    }
    Ok((lag, lyap))
}

/// The four blocks of `grad P(x, lambda, y, gamma)` with
/// `P = L_rho(x, lambda) + gamma/2 ||x - y||^2`.
#[derive(Debug, Clone)]
pub struct LyapunovGradient {
    pub grad_x: DVector<f64>,
    pub grad_lambda: DVector<f64>,
    pub grad_y: DVector<f64>,
    pub grad_gamma: f64,
    /// `||grad L_rho(x, lambda)||` over both blocks.
    pub grad_lagrangian_norm: f64,
    /// `x - y`, kept for the coupling identity.
    pub diff: DVector<f64>,
}

impl LyapunovGradient {
    pub fn norm(&self) -> f64 {
        (self.grad_x.norm_squared() + self.grad_lambda.norm_squared() + self.grad_y.norm_squared() + self.grad_gamma.powi(2))
            .sqrt()
    }
}

pub fn lyapunov_gradient_blocks(
    problem: &dyn NlpOracle,
    at: &IterationRecord,
    prev: &IterationRecord,
    gamma: f64,
    rho: f64,
) -> LyapunovGradient {
    let x = at.x_vec();
    let lambda = at.lambda_vec();
    let y = prev.x_vec();
    let c = problem.constraints(&x);
    let grad_lx = problem.gradient(&x) + problem.jacobian(&x).tr_mul(&(&lambda + &c * rho));
    let grad_lagrangian_norm = grad_lx.norm().hypot(c.norm());
    let diff = &x - &y;
    LyapunovGradient {
        grad_x: grad_lx + &diff * gamma,
        grad_lambda: c,
        grad_y: &diff * (-gamma),
        grad_gamma: 0.5 * diff.norm_squared(),
        grad_lagrangian_norm,
        diff,
    }
}

/// `f(x_k) + rho0/2 ||F(x_k)||^2 <= alpha_hat` per record.
pub fn feasibility_envelope_check(trace: &[IterationRecord], rho0: f64, alpha_hat: f64) -> Vec<CheckOutcome> {
    trace
        .iter()
        .map(|r| CheckOutcome::new(r.k, r.f + 0.5 * rho0 * r.feas_norm * r.feas_norm, alpha_hat, 0.0))
        .collect()
}

/// `gamma_k <= alpha beta_k / 2` per record `k >= 1`.
pub fn check_gamma_admissible(trace: &[IterationRecord], rho: f64, params: &TheoryParams, c: &InstanceConstants) -> Vec<CheckOutcome> {
    trace
        .iter()
        .skip(1)
        .map(|r| CheckOutcome::new(r.k, gamma_k(r.beta, rho, params.eta, c), 0.5 * params.alpha * r.beta, 0.0))
        .collect()
}

/// `||grad f(x_k) + J_{k-1}^T lambda_k + beta_k dx_k|| <= 1e-6 (1 + ||grad f(x_k)||)`.
pub fn check_optimality_identity(problem: &dyn NlpOracle, trace: &[IterationRecord]) -> Vec<CheckOutcome> {
    trace
        .iter()
        .skip(1)
        .map(|r| {
            let g = problem.gradient(&r.x_vec()).norm();
            CheckOutcome::exact(r.k, r.optimality_residual, 1e-6 * (1.0 + g), 0.0)
        })
        .collect()
}

/// The recorded exact descent margins as checks.
pub fn check_exact_descent(trace: &[IterationRecord]) -> Vec<CheckOutcome> {
    trace.iter().skip(1).map(|r| CheckOutcome::exact(r.k, -r.descent_margin, 0.0, 0.0)).collect()
}

/// All trace checks for which the constants suffice.
pub fn certify(
    problem: &dyn NlpOracle,
    trace: &[IterationRecord],
    rho: f64,
    params: &TheoryParams,
    c: &InstanceConstants,
    lambda0: &DVector<f64>,
) -> Result<Vec<CheckSummary>> {
    let mut out = vec![
        CheckSummary::from_outcomes("optimality_identity", &check_optimality_identity(problem, trace)),
        CheckSummary::from_outcomes("exact_descent", &check_exact_descent(trace)),
    ];
    let curvature: Vec<CheckOutcome> = trace
        .iter()
        .skip(1)
        .map(|r| CheckOutcome { k: r.k, lhs: 0.0, rhs: 0.0, margin: if r.descent_ok { 0.0 } else { -1.0 }, ok: r.descent_ok })
        .collect();
    out.push(CheckSummary::from_outcomes("curvature_condition", &curvature));

    let (lin, sq) = check_dual_increment(trace, c);
    out.push(CheckSummary::from_outcomes("dual_increment", &lin));
    out.push(CheckSummary::from_outcomes("dual_increment_squared", &sq));
    if trace.len() >= 3 {
        let (lag, lyap) = check_gradient_bound(problem, trace, rho, params.eta, c, None)?;
        out.push(CheckSummary::from_outcomes("lagrangian_gradient_bound", &lag));
        out.push(CheckSummary::from_outcomes("lyapunov_gradient_bound", &lyap));
    }
    out.push(CheckSummary::from_outcomes("gamma_admissible", &check_gamma_admissible(trace, rho, params, c)));

    let l_bar = c.l_bar.map(|v| v.value);
    if trace.len() >= 2 {
        let seq = lyapunov_trace(trace, GammaPolicy::Formula { constants: c, eta: params.eta }, rho, l_bar)?;
        let dec: Vec<CheckOutcome> = seq.iter().filter_map(|r| r.decrease).collect();
        out.push(CheckSummary::from_outcomes("lyapunov_decrease", &dec));
        if l_bar.is_some() {
            let lb: Vec<CheckOutcome> = seq
                .iter()
                .skip(1)
                .map(|r| CheckOutcome::new(r.k, l_bar.unwrap_or_default() - 1.0, r.p, 0.0))
                .collect();
            out.push(CheckSummary::from_outcomes("lyapunov_lower_bound", &lb));
        }
    }
    if let (Some(u), Some(c0), Some(lb)) = (c.u_bar, c.c0, c.l_bar) {
        let ah = alpha_hat(u.value, c0.value, lb.value, lambda0);
        out.push(CheckSummary::from_outcomes("feasibility_envelope", &feasibility_envelope_check(trace, c.rho0.value, ah)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Finite,
    Linear,
    Sublinear,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFitResult {
    pub regime: Regime,
    /// Estimated exponent of the desingularizing function `s^(1-nu)`.
    pub nu: Option<f64>,
    pub r_squared: f64,
    /// Half-open index range of the errors used.
    pub window: (usize, usize),
    /// Slope of `ln E` against `k` (linear) or `ln k` (sublinear).
    pub slope: f64,
    /// `exp(slope)` for linear fits.
    pub contraction: Option<f64>,
    pub diagnostic: Option<String>,
}

impl RateFitResult {
    fn undetermined(window: (usize, usize), why: impl Into<String>) -> Self {
        Self {
            regime: Regime::Undetermined,
            nu: None,
            r_squared: 0.0,
            window,
            slope: f64::NAN,
            contraction: None,
            diagnostic: Some(why.into()),
        }
    }
}

/// Fit quality threshold.
pub const RATE_FIT_MIN_R2: f64 = 0.98;
/// Minimum number of errors.
pub const RATE_FIT_MIN_LEN: usize = 20;

/// Least squares `y = a + b t`; returns `(b, R^2)`.
fn linear_fit(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let (mut stt, mut sty, mut syy) = (0.0, 0.0, 0.0);
    for (&ti, &yi) in t.iter().zip(y) {
        stt += (ti - tm) * (ti - tm);
        sty += (ti - tm) * (yi - ym);
        syy += (yi - ym) * (yi - ym);
    }
    let b = sty / stt;
    let r2 = if syy == 0.0 { 1.0 } else { (sty * sty) / (stt * syy) };
    (b, r2)
}

/// Classifies the decay of errors `E_k` observed at iteration indices `k`.
///
/// The last 10% is dropped. Values at or below `zero_tol` count as zero: a
/// zero that persists to the end of the window means finite termination.
/// `c_bar` turns a linear contraction factor into an exponent estimate.
pub fn rate_fit_errors(k: &[f64], e: &[f64], zero_tol: f64, c_bar: Option<f64>) -> RateFitResult {
    let n = e.len().min(k.len());
    if n < RATE_FIT_MIN_LEN {
        return RateFitResult::undetermined((0, n), format!("need at least {RATE_FIT_MIN_LEN} values, got {n}"));
    }
    let cut = n - n / 10;
    let window = &e[..cut];
    if let Some(first_zero) = window.iter().position(|&v| v <= zero_tol) {
        if window[first_zero..].iter().all(|&v| v.abs() <= zero_tol) {
            return RateFitResult {
                regime: Regime::Finite,
                nu: Some(0.0),
                r_squared: 1.0,
                window: (0, first_zero + 1),
                slope: f64::NEG_INFINITY,
                contraction: Some(0.0),
                diagnostic: None,
            };
        }
        return RateFitResult::undetermined((0, cut), format!("error returns above zero after index {first_zero}"));
    }
    let noise = 4.0 * f64::EPSILON * window[0].abs();
    if let Some(i) = (1..cut).find(|&i| window[i] > window[i - 1] + noise) {
        return RateFitResult::undetermined((0, cut), format!("tail is not monotone at index {i}"));
    }
    let ks = &k[..cut];
    let log_e: Vec<f64> = window.iter().map(|v| v.ln()).collect();
    let (lin_slope, lin_r2) = linear_fit(ks, &log_e);
    let sub = if ks.iter().all(|&v| v > 0.0) {
        let log_k: Vec<f64> = ks.iter().map(|v| v.ln()).collect();
        Some(linear_fit(&log_k, &log_e))
    } else {
        None
    };

    let linear_ok = lin_r2 >= RATE_FIT_MIN_R2 && lin_slope < 0.0;
    let (sub_slope, sub_r2) = sub.unwrap_or((f64::NAN, 0.0));
    let sub_ok = sub_r2 >= RATE_FIT_MIN_R2 && sub_slope < 0.0;
    if linear_ok && (!sub_ok || lin_r2 >= sub_r2) {
        let q = lin_slope.exp();
        let nu = match c_bar {
            Some(cb) if cb > 0.0 && window[0] < 1.0 => {
                0.5 * (1.0 + ((1.0 / q - 1.0) / cb).ln() / window[0].ln())
            }
            _ => 0.5,
        };
        RateFitResult {
            regime: Regime::Linear,
            nu: Some(nu.clamp(0.0, 0.5)),
            r_squared: lin_r2,
            window: (0, cut),
            slope: lin_slope,
            contraction: Some(q),
            diagnostic: None,
        }
    } else if sub_ok {
        let nu = 0.5 * (1.0 - 1.0 / sub_slope);
        RateFitResult {
            regime: Regime::Sublinear,
            nu: Some(nu.clamp(0.5, 1.0 - f64::EPSILON)),
            r_squared: sub_r2,
            window: (0, cut),
            slope: sub_slope,
            contraction: None,
            diagnostic: None,
        }
    } else {
        let mut r = RateFitResult::undetermined((0, cut), "no fit reached the R^2 threshold");
        r.r_squared = lin_r2.max(sub_r2);
        r
    }
}

/// Rate fit on a Lyapunov sequence with `P*` taken as the final value.
pub fn rate_fit(p: &[f64], c_bar: Option<f64>) -> RateFitResult {
    let Some(&p_star) = p.last() else {
        return RateFitResult::undetermined((0, 0), "empty sequence");
    };
    let e: Vec<f64> = p.iter().map(|v| v - p_star).collect();
    let k: Vec<f64> = (1..=p.len()).map(|i| i as f64).collect();
    rate_fit_errors(&k, &e, 4.0 * f64::EPSILON * p_star.abs(), c_bar)
}

/// `c_bar = gamma_low / (8 (Gamma_max + D_S + 2 gamma_bar)^2)`.
pub fn c_bar(gamma_low: f64, big_gamma_max: f64, d_s: f64, gamma_bar: f64) -> f64 {
    gamma_low / (8.0 * (big_gamma_max + d_s + 2.0 * gamma_bar).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit() -> InstanceConstants {
        InstanceConstants::uniform(1.0, 1.0, 1.0, 1.0, 1.0)
    }

    #[test]
    fn c1_c2_values() {
        assert_eq!(c1(1.0, 1.0, 1.0), 8.0);
        assert_eq!(c2(1.0, 1.0, 1.0, 1.0, 1.0), 32.0);
        assert_relative_eq!(c1(0.0, 3.0, 2.0), 2.0 * 9.0 / 4.0);
    }

    #[test]
    fn gamma_examples() {
        assert_relative_eq!(gamma_k(1.0, 100.0, 2.0, &unit()), 7.68, max_relative = 1e-14);
        assert_relative_eq!(gamma_from_cmax(4.0, 2.0, 1.0), 2.0, max_relative = 1e-15);
        let mut last = f64::INFINITY;
        for e in 1..12 {
            let g = gamma_k(1.0, 10f64.powi(e), 2.0, &unit());
            assert!(g < last);
            last = g;
        }
    }

    #[test]
    fn rho_bound_unit_constants() {
        let params = TheoryParams::default();
        assert_relative_eq!(rho_lower_bound(&unit(), &params, Some(1.0)).unwrap(), 746_496.0, max_relative = 1e-12);
    }

    #[test]
    fn rho_bound_limits() {
        let params = TheoryParams::default();
        let mut c = unit();
        c.m_jac.value = 1e-9;
        c.m_f.value = 0.0;
        c.l_f.value = 0.0;
        // first term (4 M_F^2)^2 vanishes; remaining terms vanish with M_f = L_f = 0
        assert!(rho_lower_bound(&c, &params, Some(1.0)).unwrap() < 1e-30);
        let mut tiny = InstanceConstants::uniform(1e-9, 1e-9, 1e-9, 1e-9, 1.0);
        tiny.rho0.value = 10.0;
        assert!(rho_lower_bound(&tiny, &params, Some(1.0)).unwrap() >= 30.0);
    }

    #[test]
    fn rho_bound_reports_missing() {
        let mut c = unit();
        c.l_f.value = f64::NAN;
        let err = rho_lower_bound(&c, &TheoryParams::default(), None).unwrap_err().to_string();
        assert!(err.contains("L_f") && err.contains("D_S"), "{err}");
    }

    #[test]
    fn big_gamma_values() {
        assert_relative_eq!(gamma_of_beta(1.0, 1.0, &unit()), 16.0);
        assert_relative_eq!(gamma_of_beta(0.0, 1.0, &unit()), 8.0);
        let d1 = gamma_of_beta(2.0, 1.0, &unit()) - gamma_of_beta(1.0, 1.0, &unit());
        let d2 = gamma_of_beta(5.0, 1.0, &unit()) - gamma_of_beta(4.0, 1.0, &unit());
        assert!(d1 > 0.0);
        assert_relative_eq!(d1, d2, max_relative = 1e-14);
    }

    #[test]
    fn lpsi_examples() {
        assert_eq!(lpsi_bound_from_norms(&[0.0, 0.0], 3.0, 1.0, 2.0).unwrap(), 2.0 * (2.0 + 6.0));
        assert_eq!(lpsi_bound_from_norms(&[3.0], 2.0, 1.0, 1.0).unwrap(), 7.0);
        assert!(lpsi_bound_from_norms(&[], 2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn alpha_hat_examples() {
        assert_eq!(alpha_hat(1.0, 1.0, 0.0, &DVector::zeros(2)), 11.0);
        let l = DVector::from_row_slice(&[0.5, -1.0]);
        let diff = alpha_hat(0.0, 1.0, 0.0, &(&l * 2.0)) - alpha_hat(0.0, 1.0, 0.0, &l);
        assert_relative_eq!(diff, 24.0 * l.norm_squared(), max_relative = 1e-14);
    }

    #[test]
    fn hand_lyapunov_pair() {
        let seq = lyapunov_sequence(
            &[
                LyapunovInput { lagrangian: 3.0, gamma: 0.0, dx_norm: 0.0 },
                LyapunovInput { lagrangian: 2.0, gamma: 1.0, dx_norm: 2.0 },
            ],
            None,
        )
        .unwrap();
        assert_eq!(seq[1].p, 4.0);
        assert_eq!(seq[0].delta_p, Some(1.0));
    }

    #[test]
    fn stationary_lyapunov_passes_with_equality() {
        let inputs = vec![LyapunovInput { lagrangian: -1.5, gamma: 0.3, dx_norm: 0.0 }; 6];
        let seq = lyapunov_sequence(&inputs, Some(-2.0)).unwrap();
        for r in &seq {
            assert_eq!(r.p, -1.5);
            if let Some(d) = r.decrease {
                assert!(d.ok);
                assert_eq!(d.lhs, 0.0);
                assert_eq!(d.rhs, 0.0);
            }
            assert_eq!(r.lower_bound_ok, Some(true));
        }
    }

    #[test]
    fn automatic_delta_covers_beta_max() {
        let c = InstanceConstants::uniform(2.0, 0.5, 1.5, 3.0, 0.7);
        for beta_max in [0.01, 1.0, 37.0, 1e4] {
            let p = TheoryParams::automatic(&c, 0.5, beta_max, 2.0);
            assert!(p.delta >= 2.0);
            let (_, hi) = beta_interval_large(&c, p.delta);
            assert!(hi >= beta_max * (1.0 - 1e-12), "{hi} < {beta_max}");
        }
        // L_f sigma > M_f L_F: the small-beta interval ends at the switch point
        let c = InstanceConstants::uniform(0.5, 4.0, 1.0, 1.0, 4.0);
        let p = TheoryParams::automatic(&c, 0.5, 1.0, 2.0);
        let (_, hi) = beta_interval_small(&c, p.delta_prime.unwrap());
        assert_relative_eq!(hi, (16.0 - 0.5) / 2.0, max_relative = 1e-12);
        // target 1.75 < L_f = 4 is out of reach of the upper root
        let c = InstanceConstants::uniform(0.5, 4.0, 1.0, 1.0, 1.0);
        assert_eq!(TheoryParams::automatic(&c, 0.5, 1.0, 2.0).delta_prime, None);
        let p = TheoryParams::automatic(&unit(), 0.5, 1.0, 2.0);
        assert_eq!(p.delta_prime, None);
    }

    #[test]
    fn synthetic_geometric_is_linear() {
        let k: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let e: Vec<f64> = k.iter().map(|&i| 0.5f64.powf(i)).collect();
        let r = rate_fit_errors(&k, &e, 0.0, None);
        assert_eq!(r.regime, Regime::Linear);
        assert!((r.contraction.unwrap() - 0.5).abs() <= 1e-3);
    }

    #[test]
    fn synthetic_power_is_sublinear() {
        let k: Vec<f64> = (1..=200).map(|i| i as f64).collect();
        let e: Vec<f64> = k.iter().map(|&i| i.powi(-2)).collect();
        let r = rate_fit_errors(&k, &e, 0.0, None);
        assert_eq!(r.regime, Regime::Sublinear);
        assert!((r.slope + 2.0).abs() <= 0.1);
        assert_relative_eq!(r.nu.unwrap(), 0.75, max_relative = 1e-6);
    }

    #[test]
    fn exact_zero_is_finite() {
        let k: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let e: Vec<f64> = (0..30).map(|i| if i < 7 { (7 - i) as f64 } else { 0.0 }).collect();
        assert_eq!(rate_fit_errors(&k, &e, 0.0, None).regime, Regime::Finite);
    }

    #[test]
    fn short_or_noisy_is_undetermined() {
        let k: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(rate_fit_errors(&k, &k, 0.0, None).regime, Regime::Undetermined);
        let k: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let e: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { 2.0 }).collect();
        let r = rate_fit_errors(&k, &e, 0.0, None);
        assert_eq!(r.regime, Regime::Undetermined);
        assert!(r.diagnostic.unwrap().contains("monotone"));
    }

    #[test]
    fn p_based_fit_uses_final_value() {
        let p: Vec<f64> = (0..80).map(|i| 5.0 + 0.7f64.powi(i)).collect();
        let r = rate_fit(&p, None);
        assert_eq!(r.regime, Regime::Linear);
        assert!((r.contraction.unwrap() - 0.7).abs() < 1e-3);
    }
}
