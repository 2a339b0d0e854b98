//! Linearized augmented Lagrangian (LAL) method for
//!
//! ```text
//! min f(x)  s.t.  F(x) = 0,   F: R^n -> R^m,  m <= n
//! ```
//!
//! Each outer step minimizes the augmented Lagrangian with `F` replaced by
//! its linearization at `x_k`, plus a proximal term `beta/2 ||x - x_k||^2`,
//! then updates the multiplier on the same linearized constraint.
//!
//! Alongside the solver the crate provides:
//! - [`theory`]: parameter formulas, a Lyapunov sequence and inequality checks
//!   that can be evaluated on recorded traces, plus a rate classifier;
//! - [`scp`]: a sequential convex programming baseline;
//! - [`bench`]: a seeded QCQP generator, suite runner and performance profiles;
//! - [`io`]: problem files and trace CSVs.

pub mod bench;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod scp;
pub mod solver;
pub mod subproblem;
pub mod theory;

pub use error::{Error, Result};
pub use model::{
    check_derivatives, estimate_constants, stationarity, Constant, ConstantsFile, FnOracle, InstanceConstants,
    NlpOracle, Provenance, Qcqp, QuadConstraint, StationarityResidual,
};
pub use solver::{solve, BetaPolicy, IterationRecord, RunReport, SolverConfig, Status, SubproblemMode};
