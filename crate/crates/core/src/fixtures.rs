//! Small problems with known solutions, used by tests and examples.

use nalgebra::{DMatrix, DVector};

use crate::linalg::SymMatrix;
use crate::model::{FnOracle, Qcqp, QuadConstraint};

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}

fn unwrap<T>(r: crate::Result<T>) -> T {
    r.expect("fixture data is dimensionally consistent")
}

/// `min 3 x_1 + 4 x_2  s.t.  x_1^2 + x_2^2 = 1`.
/// Minimizer `(-0.6, -0.8)` with `lambda = 2.5`; maximizer `(0.6, 0.8)`.
pub fn sphere_linear() -> Qcqp {
    unwrap(Qcqp::new(
        SymMatrix::zeros(2),
        dv(&[3.0, 4.0]),
        0.0,
        vec![QuadConstraint::new(SymMatrix::dense(DMatrix::identity(2, 2) * 2.0), DVector::zeros(2), -1.0)],
    ))
}

/// `min 1/2 ||x||^2  s.t.  x_1 = 1` in `R^2`. Solution `(1, 0)`, `lambda = -1`.
pub fn half_norm_linear() -> Qcqp {
    unwrap(Qcqp::new(
        SymMatrix::identity(2),
        DVector::zeros(2),
        0.0,
        vec![QuadConstraint::linear(dv(&[1.0, 0.0]), -1.0)],
    ))
}

/// `min 0  s.t.  x = 0` in `R`.
pub fn identity_constraint_1d() -> Qcqp {
    unwrap(Qcqp::new(SymMatrix::zeros(1), dv(&[0.0]), 0.0, vec![QuadConstraint::linear(dv(&[1.0]), 0.0)]))
}

/// `min x^2/2  s.t.  x = 0` in `R`.
pub fn half_square_identity_1d() -> Qcqp {
    unwrap(Qcqp::new(SymMatrix::identity(1), dv(&[0.0]), 0.0, vec![QuadConstraint::linear(dv(&[1.0]), 0.0)]))
}

/// `min -x^2  s.t.  x = 0` in `R`: the subproblem needs `beta + rho > 2`.
pub fn concave_linear_1d() -> Qcqp {
    unwrap(Qcqp::new(
        SymMatrix::dense(DMatrix::from_element(1, 1, -2.0)),
        dv(&[0.0]),
        0.0,
        vec![QuadConstraint::linear(dv(&[1.0]), 0.0)],
    ))
}

/// `min x^4/4  s.t.  x = 1` in `R`. Solution `x = 1`, `lambda = -1`.
pub fn quartic_linear_1d() -> FnOracle {
    unwrap(FnOracle::new(
        1,
        1,
        |x| x[0].powi(4) / 4.0,
        |x| dv(&[x[0].powi(3)]),
        |x| dv(&[x[0] - 1.0]),
        |_| DMatrix::from_element(1, 1, 1.0),
    ))
}

/// `min 1/2 x^T Q x + p^T x  s.t.  A x = b` with a fixed SPD `Q` and a
/// full-rank `A` in `R^{2x4}`.
pub fn quadratic_two_linear() -> Qcqp {
    let q = DMatrix::from_row_slice(
        4,
        4,
        &[4.0, 1.0, 0.0, 0.5, 1.0, 3.0, 0.2, 0.0, 0.0, 0.2, 2.0, -0.3, 0.5, 0.0, -0.3, 1.5],
    );
    unwrap(Qcqp::new(
        SymMatrix::dense(q),
        dv(&[1.0, -1.0, 0.5, 2.0]),
        0.0,
        vec![
            QuadConstraint::linear(dv(&[1.0, 1.0, 0.0, 1.0]), -1.0),
            QuadConstraint::linear(dv(&[0.0, 1.0, -1.0, 2.0]), 0.5),
        ],
    ))
}

/// `min 1/2 ||x - a||^2  s.t.  ||x||^2 = 4` in `R^3` with `a = (1, 2, 2)`.
/// Solution `2 a / ||a||` with `lambda = ||a|| / 2 - 1`.
pub fn projection_onto_sphere() -> Qcqp {
    let a = dv(&[1.0, 2.0, 2.0]);
    unwrap(Qcqp::new(
        SymMatrix::identity(3),
        -&a,
        0.5 * a.norm_squared(),
        vec![QuadConstraint::new(SymMatrix::dense(DMatrix::identity(3, 3) * 2.0), DVector::zeros(3), -4.0)],
    ))
}

/// A named fixture with its starting point.
pub struct Fixture {
    pub name: &'static str,
    pub problem: Qcqp,
    pub x0: DVector<f64>,
}

/// QCQP fixtures with starting points away from the solution.
pub fn suite() -> Vec<Fixture> {
    vec![
        Fixture { name: "sphere_linear", problem: sphere_linear(), x0: dv(&[1.0, 0.0]) },
        Fixture { name: "half_norm_linear", problem: half_norm_linear(), x0: dv(&[0.0, 0.0]) },
        Fixture { name: "quadratic_two_linear", problem: quadratic_two_linear(), x0: dv(&[0.5, -0.5, 1.0, 0.0]) },
        Fixture { name: "projection_onto_sphere", problem: projection_onto_sphere(), x0: dv(&[2.0, 0.0, 0.0]) },
    ]
}
