//! Problem abstraction for `min f(x) s.t. F(x) = 0`, the explicit QCQP
//! class, derivative validation, stationarity measures and the bundle of
//! instance constants used by the theory checks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SymMatrix};
use crate::rng::SplitMix64;

/// Oracle access to `f`, `grad f`, `F` and the Jacobian of `F`.
///
/// Implementations must be pure: the same input always gives the same
/// output, and evaluation never mutates shared state.
pub trait NlpOracle: Send + Sync {
    /// Decision dimension `n`.
    fn dim(&self) -> usize;
    /// Number of equality constraints `m`.
    fn num_constraints(&self) -> usize;
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `m x n` Jacobian of the constraints.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `(Q, p)` when `f(x) = 1/2 x^T Q x + p^T x + c` exactly.
    fn quadratic_objective(&self) -> Option<(&SymMatrix, &DVector<f64>)> {
        None
    }

    /// The explicit QCQP data, when the whole problem is one.
    fn as_qcqp(&self) -> Option<&Qcqp> {
        None
    }

    fn is_quadratic(&self) -> bool {
        self.as_qcqp().is_some()
    }
}

/// One quadratic equality constraint `1/2 x^T A x + b^T x + c = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadConstraint {
    pub a: SymMatrix,
    pub b: DVector<f64>,
    pub c: f64,
}

impl QuadConstraint {
    pub fn new(a: SymMatrix, b: DVector<f64>, c: f64) -> Self {
        Self { a: resymmetrize(a), b, c }
    }

    /// Affine constraint `b^T x + c = 0`.
    pub fn linear(b: DVector<f64>, c: f64) -> Self {
        let n = b.len();
        Self { a: SymMatrix::zeros(n), b, c }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.a.quad_form(x) + self.b.dot(x) + self.c
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a.mul_vec(x) + &self.b
    }
}

fn resymmetrize(m: SymMatrix) -> SymMatrix {
    match m {
        SymMatrix::Dense(d) => SymMatrix::dense(d),
        sparse => sparse,
    }
}

/// `min 1/2 x^T Q x + p^T x + c  s.t.  1/2 x^T A_i x + b_i^T x + c_i = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qcqp {
    pub q: SymMatrix,
    pub p: DVector<f64>,
    pub c: f64,
    pub constraints: Vec<QuadConstraint>,
}

impl Qcqp {
    pub fn new(q: SymMatrix, p: DVector<f64>, c: f64, constraints: Vec<QuadConstraint>) -> Result<Self> {
        let n = p.len();
        if q.dim() != n {
            return Err(Error::Dimension(format!("Q is {0}x{0} but p has length {n}", q.dim())));
        }
        if constraints.is_empty() || constraints.len() > n {
            return Err(Error::Dimension(format!(
                "need 1 <= m <= n, got m = {} with n = {n}",
                constraints.len()
            )));
        }
        for (i, con) in constraints.iter().enumerate() {
            if con.a.dim() != n || con.b.len() != n {
                return Err(Error::Dimension(format!("constraint {i} does not match n = {n}")));
            }
        }
        Ok(Self { q: resymmetrize(q), p, c, constraints })
    }

    /// Smallest constant `L` with `||J(x) - J(y)||_2 <= L ||x - y||`, bounded
    /// by the norm of the stacked operator `d -> (A_1 d, ..., A_m d)`, i.e.
    /// `sqrt(lambda_max(sum_i A_i^2))`.
    pub fn jacobian_lipschitz(&self) -> f64 {
        let n = self.dim();
        if self.constraints.len() == 1 {
            return self.constraints[0].a.spectral_norm();
        }
        let all_dense = self.constraints.iter().all(|c| !c.a.is_sparse());
        if all_dense && n <= 200 {
            let mut acc = DMatrix::zeros(n, n);
            for con in &self.constraints {
                let a = con.a.to_dense();
                acc += &a * &a;
            }
            return linalg::sym_spectral_norm(&acc).max(0.0).sqrt();
        }
        linalg::power_norm(n, |v| {
            let mut out = DVector::zeros(n);
            for con in &self.constraints {
                out += con.a.mul_vec(&con.a.mul_vec(v));
            }
            out
        })
        .sqrt()
    }
}

impl NlpOracle for Qcqp {
    fn dim(&self) -> usize {
        self.p.len()
    }

    fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.q.quad_form(x) + self.p.dot(x) + self.c
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.q.mul_vec(x) + &self.p
    }

    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.constraints.len(), self.constraints.iter().map(|c| c.value(x)))
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut j = DMatrix::zeros(self.constraints.len(), n);
        for (i, con) in self.constraints.iter().enumerate() {
            let g = con.gradient(x);
            j.row_mut(i).copy_from(&g.transpose());
        }
        j
    }

    fn quadratic_objective(&self) -> Option<(&SymMatrix, &DVector<f64>)> {
        Some((&self.q, &self.p))
    }

    fn as_qcqp(&self) -> Option<&Qcqp> {
        Some(self)
    }
}

type ScalarFn = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type VectorFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatrixFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// An oracle assembled from closures, for smooth problems that are not QCQPs.
pub struct FnOracle {
    n: usize,
    m: usize,
    f: ScalarFn,
    grad: VectorFn,
    cons: VectorFn,
    jac: MatrixFn,
}

impl FnOracle {
    pub fn new(
        n: usize,
        m: usize,
        f: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        cons: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jac: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if m == 0 || m > n {
            return Err(Error::Dimension(format!("need 1 <= m <= n, got m = {m}, n = {n}")));
        }
        Ok(Self {
            n,
            m,
            f: Box::new(f),
            grad: Box::new(grad),
            cons: Box::new(cons),
            jac: Box::new(jac),
        })
    }
}

impl std::fmt::Debug for FnOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnOracle").field("n", &self.n).field("m", &self.m).finish()
    }
}

impl NlpOracle for FnOracle {
    fn dim(&self) -> usize {
        self.n
    }
    fn num_constraints(&self) -> usize {
        self.m
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        (self.f)(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad)(x)
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.cons)(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jac)(x)
    }
}

/// Where a constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    UserSupplied,
    TrajectoryEstimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub value: f64,
    pub source: Provenance,
}

impl Constant {
    pub fn user(value: f64) -> Self {
        Self { value, source: Provenance::UserSupplied }
    }
    pub fn estimated(value: f64) -> Self {
        Self { value, source: Provenance::TrajectoryEstimated }
    }
}

/// Smoothness and regularity constants of an instance on a compact set.
///
/// `m_jac`/`l_jac` are the bound and Lipschitz constant of the constraint
/// Jacobian; `sigma` bounds its smallest singular value from below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceConstants {
    pub m_f: Constant,
    pub l_f: Constant,
    pub m_jac: Constant,
    pub l_jac: Constant,
    pub sigma: Constant,
    pub rho0: Constant,
    pub u_bar: Option<Constant>,
    pub l_bar: Option<Constant>,
    pub c0: Option<Constant>,
}

impl InstanceConstants {
    /// All five smoothness constants user-supplied, `rho0 = 0`, no level-set bounds.
    pub fn uniform(m_f: f64, l_f: f64, m_jac: f64, l_jac: f64, sigma: f64) -> Self {
        Self {
            m_f: Constant::user(m_f),
            l_f: Constant::user(l_f),
            m_jac: Constant::user(m_jac),
            l_jac: Constant::user(l_jac),
            sigma: Constant::user(sigma),
            rho0: Constant::user(0.0),
            u_bar: None,
            l_bar: None,
            c0: None,
        }
    }

    /// Overrides every field present in `file`.
    pub fn with_overrides(mut self, file: &ConstantsFile) -> Self {
        let set = |slot: &mut Constant, v: Option<f64>| {
            if let Some(v) = v {
                *slot = Constant::user(v);
            }
        };
        set(&mut self.m_f, file.m_f);
        set(&mut self.l_f, file.l_f);
        set(&mut self.m_jac, file.m_jac);
        set(&mut self.l_jac, file.l_jac);
        set(&mut self.sigma, file.sigma);
        set(&mut self.rho0, file.rho0);
        if let Some(v) = file.u_bar {
            self.u_bar = Some(Constant::user(v));
        }
        if let Some(v) = file.l_bar {
            self.l_bar = Some(Constant::user(v));
        }
        if let Some(v) = file.c0 {
            self.c0 = Some(Constant::user(v));
        }
        self
    }

    /// Builds a fully user-supplied bundle; errors list any missing fields.
    pub fn from_file(file: &ConstantsFile) -> Result<Self> {
        let mut missing = Vec::new();
        let mut take = |name: &str, v: Option<f64>| {
            v.unwrap_or_else(|| {
                missing.push(name.to_string());
                f64::NAN
            })
        };
        let m_f = take("M_f", file.m_f);
        let l_f = take("L_f", file.l_f);
        let m_jac = take("M_F", file.m_jac);
        let l_jac = take("L_F", file.l_jac);
        let sigma = take("sigma", file.sigma);
        if !missing.is_empty() {
            return Err(Error::MissingConstants(missing.join(", ")));
        }
        let mut c = Self::uniform(m_f, l_f, m_jac, l_jac, sigma);
        c.rho0 = Constant::user(file.rho0.unwrap_or(0.0));
        c.u_bar = file.u_bar.map(Constant::user);
        c.l_bar = file.l_bar.map(Constant::user);
        c.c0 = file.c0.map(Constant::user);
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("M_f", self.m_f.value),
            ("M_F", self.m_jac.value),
            ("sigma", self.sigma.value),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("L_f", self.l_f.value), ("L_F", self.l_jac.value), ("rho0", self.rho0.value)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if let Some(c0) = self.c0 {
            if !(c0.value > 0.0) {
                return Err(Error::Config(format!("c0 must be positive, got {}", c0.value)));
            }
        }
        Ok(())
    }
}

/// The `constants` object of a problem file; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantsFile {
    #[serde(rename = "M_f", default, skip_serializing_if = "Option::is_none")]
    pub m_f: Option<f64>,
    #[serde(rename = "L_f", default, skip_serializing_if = "Option::is_none")]
    pub l_f: Option<f64>,
    #[serde(rename = "M_F", default, skip_serializing_if = "Option::is_none")]
    pub m_jac: Option<f64>,
    #[serde(rename = "L_F", default, skip_serializing_if = "Option::is_none")]
    pub l_jac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<f64>,
    #[serde(rename = "U_bar", default, skip_serializing_if = "Option::is_none")]
    pub u_bar: Option<f64>,
    #[serde(rename = "L_bar", default, skip_serializing_if = "Option::is_none")]
    pub l_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
}

/// `||grad f(x) + J(x)^T lambda||` and `||F(x)||`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityResidual {
    pub grad_lag_norm: f64,
    pub feas_norm: f64,
}

impl StationarityResidual {
    pub fn max(&self) -> f64 {
        self.grad_lag_norm.max(self.feas_norm)
    }
}

pub fn stationarity(problem: &dyn NlpOracle, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<StationarityResidual> {
    check_dims(problem, x, lambda)?;
    let g = problem.gradient(x) + problem.jacobian(x).tr_mul(lambda);
    Ok(StationarityResidual { grad_lag_norm: g.norm(), feas_norm: problem.constraints(x).norm() })
}

pub(crate) fn check_dims(problem: &dyn NlpOracle, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<()> {
    if x.len() != problem.dim() || lambda.len() != problem.num_constraints() {
        return Err(Error::Dimension(format!(
            "expected x in R^{} and lambda in R^{}, got {} and {}",
            problem.dim(),
            problem.num_constraints(),
            x.len(),
            lambda.len()
        )));
    }
    Ok(())
}

/// Threshold above which a finite-difference mismatch counts as a failure.
pub const DERIVATIVE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    /// Max over points and coordinates of `|g_i - fd_i| / max(1, |fd_i|)`.
    pub gradient_error: f64,
    /// Same measure over all Jacobian entries.
    pub jacobian_error: f64,
    pub points_checked: usize,
    pub passed: bool,
}

/// Compares analytic derivatives to central differences at `num_points`
/// standard-normal points drawn from `seed`.
pub fn check_derivatives(problem: &dyn NlpOracle, num_points: usize, seed: u64) -> Result<DerivativeReport> {
    if num_points == 0 {
        return Err(Error::Config("num_points must be at least 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let n = problem.dim();
    let points: Vec<DVector<f64>> =
        (0..num_points).map(|_| DVector::from_fn(n, |_, _| rng.next_normal())).collect();
    check_derivatives_at(problem, &points)
}

pub fn check_derivatives_at(problem: &dyn NlpOracle, points: &[DVector<f64>]) -> Result<DerivativeReport> {
    let n = problem.dim();
    let m = problem.num_constraints();
    let mut grad_err: f64 = 0.0;
    let mut jac_err: f64 = 0.0;
    for x in points {
        let g = problem.gradient(x);
        let j = problem.jacobian(x);
        ensure_finite("gradient", x, g.iter())?;
        ensure_finite("jacobian", x, j.iter())?;
        let mut xp = x.clone();
        for i in 0..n {
            let h = 1e-6 * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let fp = problem.objective(&xp);
            let cp = problem.constraints(&xp);
            xp[i] = x[i] - h;
            let fm = problem.objective(&xp);
            let cm = problem.constraints(&xp);
            xp[i] = x[i];
            ensure_finite("objective", x, [fp, fm].iter())?;
            ensure_finite("constraints", x, cp.iter().chain(cm.iter()))?;

            let fd = (fp - fm) / (2.0 * h);
            grad_err = grad_err.max((g[i] - fd).abs() / fd.abs().max(1.0));
            for r in 0..m {
                let fd = (cp[r] - cm[r]) / (2.0 * h);
                jac_err = jac_err.max((j[(r, i)] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    Ok(DerivativeReport {
        gradient_error: grad_err,
        jacobian_error: jac_err,
        points_checked: points.len(),
        passed: grad_err <= DERIVATIVE_TOLERANCE && jac_err <= DERIVATIVE_TOLERANCE,
    })
}

fn ensure_finite<'a>(what: &'static str, x: &DVector<f64>, mut vals: impl Iterator<Item = &'a f64>) -> Result<()> {
    if vals.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, point: x.iter().copied().collect() })
    }
}

/// Constants estimated from sample points, plus any warnings raised.
#[derive(Debug, Clone)]
pub struct ConstantsEstimate {
    pub constants: InstanceConstants,
    pub warnings: Vec<String>,
}

/// Estimates the smoothness constants over `samples`.
///
/// Bounds (`M_f`, `M_F`, `sigma`) are maxima/minima over the samples. For a
/// QCQP the Lipschitz constants are the exact curvature norms; otherwise they
/// are the largest secant ratios over sample pairs.
pub fn estimate_constants(problem: &dyn NlpOracle, samples: &[DVector<f64>]) -> Result<ConstantsEstimate> {
    if samples.len() < 2 {
        return Err(Error::Config("estimate_constants needs at least two sample points".into()));
    }
    let mut warnings = Vec::new();
    let grads: Vec<DVector<f64>> = samples.iter().map(|x| problem.gradient(x)).collect();
    let jacs: Vec<DMatrix<f64>> = samples.iter().map(|x| problem.jacobian(x)).collect();

    let m_f = grads.iter().map(|g| g.norm()).fold(0.0, f64::max);
    let m_jac = jacs.iter().map(linalg::spectral_norm).fold(0.0, f64::max);
    let mut sigma = f64::INFINITY;
    for (x, j) in samples.iter().zip(&jacs) {
        let s = linalg::sigma_min(j);
        if s <= 0.0 {
            warnings.push(format!(
                "Jacobian loses full row rank at sample {:?}; sigma_min(grad F) > 0 is violated locally",
                x.as_slice()
            ));
        }
        sigma = sigma.min(s);
    }

    let (l_f, l_jac) = match problem.as_qcqp() {
        Some(qcqp) => (qcqp.q.spectral_norm(), qcqp.jacobian_lipschitz()),
        None => {
            let mut l_f: f64 = 0.0;
            let mut l_jac: f64 = 0.0;
            for a in 0..samples.len() {
                for b in a + 1..samples.len() {
                    let dist = (&samples[a] - &samples[b]).norm();
                    if dist == 0.0 {
                        continue;
                    }
                    l_f = l_f.max((&grads[a] - &grads[b]).norm() / dist);
                    l_jac = l_jac.max(linalg::spectral_norm(&(&jacs[a] - &jacs[b])) / dist);
                }
            }
            (l_f, l_jac)
        }
    };

    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ConstantsEstimate {
        constants: InstanceConstants {
            m_f: Constant::estimated(m_f),
            l_f: Constant::estimated(l_f),
            m_jac: Constant::estimated(m_jac),
            l_jac: Constant::estimated(l_jac),
            sigma: Constant::estimated(sigma),
            rho0: Constant::estimated(0.0),
            u_bar: None,
            l_bar: None,
            c0: None,
        },
        warnings,
    })
}
