//! Seeded random QCQP instances.
//!
//! Draw order from one [`SplitMix64`] stream seeded with `spec.seed`:
//!
//! 1. `mu ~ U[mu_lo, mu_hi)`;
//! 2. `G` (n x n), then `Q = G^T G + mu I`;
//! 3. `p ~ N(0, I)`, then `x0 ~ N(0, I)`;
//! 4. per constraint: `B` (n x n), `b_i ~ N(0, I)`, then `c_i ~ N(0, 1)` unless
//!    the start is feasible, in which case `c_i = -1/2 x0^T A_i x0 - b_i^T x0`
//!    and nothing is drawn;
//! 5. while `sigma_min(J(x0)) <= 1e-6`, redraw every `b_i` (and `c_i` as in
//!    step 4), at most 10 times.
//!
//! For `n <= DENSE_LIMIT` a random matrix is filled row-major; each entry is
//! kept when a uniform draw is below `density` (no draw when `density == 1`)
//! and then gets a normal. Above `DENSE_LIMIT` each row gets
//! `k = ceil(density * n)` entries at uniformly drawn columns (column draw,
//! then normal), duplicates summed. Entries are scaled by `1 / sqrt(k)` with
//! `k = max(1, density * n)`, so `G^T G` has unit diagonal in expectation, and
//! `A_i = scale (B + B^T) / (2 sqrt 2)` has spectral norm close to `scale`
//! (semicircle edge of a symmetric matrix with off-diagonal variance `1/(2k)`).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{sigma_min, CsrMatrix, SymMatrix, DENSE_LIMIT};
use crate::model::{NlpOracle, Qcqp, QuadConstraint};
use crate::rng::SplitMix64;

/// `sigma_min(J(x0))` must exceed this.
pub const RANK_THRESHOLD: f64 = 1e-6;
/// Redraws of the linear terms before giving up.
pub const RESAMPLE_LIMIT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub density: f64,
    pub mu_lo: f64,
    pub mu_hi: f64,
    /// Approximate spectral norm of each `A_i`.
    pub constraint_scale: f64,
    pub feasible_start: bool,
}

impl GeneratorSpec {
    pub fn new(n: usize, m: usize, seed: u64) -> Self {
        Self { n, m, seed, density: 1.0, mu_lo: 0.1, mu_hi: 1.0, constraint_scale: 1.0, feasible_start: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.n {
            return Err(Error::Config(format!("need 1 <= m <= n, got n = {}, m = {}", self.n, self.m)));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if !(self.mu_lo.is_finite() && self.mu_hi.is_finite() && self.mu_lo <= self.mu_hi) {
            return Err(Error::Config(format!("bad curvature range [{}, {}]", self.mu_lo, self.mu_hi)));
        }
        if !(self.constraint_scale.is_finite() && self.constraint_scale >= 0.0) {
            return Err(Error::Config(format!("bad constraint scale {}", self.constraint_scale)));
        }
        Ok(())
    }

    fn entries_per_row(&self) -> f64 {
        (self.density * self.n as f64).max(1.0)
    }
}

enum Random {
    Dense(DMatrix<f64>),
    Triplets(Vec<(usize, usize, f64)>),
}

fn random_matrix(spec: &GeneratorSpec, rng: &mut SplitMix64) -> Random {
    let n = spec.n;
    let scale = 1.0 / spec.entries_per_row().sqrt();
    if n <= DENSE_LIMIT {
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if spec.density >= 1.0 || rng.next_f64() < spec.density {
                    g[(i, j)] = rng.next_normal() * scale;
                }
            }
        }
        Random::Dense(g)
    } else {
        let k = (spec.density * n as f64).ceil().max(1.0) as usize;
        let mut t = Vec::with_capacity(n * k);
        for i in 0..n {
            for _ in 0..k {
                let j = ((rng.next_f64() * n as f64) as usize).min(n - 1);
                t.push((i, j, rng.next_normal() * scale));
            }
        }
        Random::Triplets(t)
    }
}

fn normals(n: usize, rng: &mut SplitMix64) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.next_normal()))
}

fn gram_plus_shift(g: Random, mu: f64, n: usize) -> SymMatrix {
    match g {
        Random::Dense(g) => SymMatrix::dense(g.tr_mul(&g) + DMatrix::identity(n, n) * mu),
        Random::Triplets(t) => {
            // G^T G = sum over rows of the outer product of that row
            let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
            for (i, j, v) in t {
                by_row[i].push((j, v));
            }
            let (mut rows, mut cols, mut vals) = (Vec::new(), Vec::new(), Vec::new());
            for row in &by_row {
                for &(a, va) in row {
                    for &(b, vb) in row {
                        rows.push(a);
                        cols.push(b);
                        vals.push(va * vb);
                    }
                }
            }
            for i in 0..n {
                rows.push(i);
                cols.push(i);
                vals.push(mu);
            }
            SymMatrix::sparse(CsrMatrix::from_triplets(n, &rows, &cols, &vals))
        }
    }
}

fn symmetric_part(b: Random, factor: f64, n: usize) -> SymMatrix {
    match b {
        Random::Dense(b) => SymMatrix::dense((&b + b.transpose()) * factor),
        Random::Triplets(t) => {
            let (mut rows, mut cols, mut vals) = (Vec::new(), Vec::new(), Vec::new());
            for (i, j, v) in t {
                rows.extend([i, j]);
                cols.extend([j, i]);
                vals.extend([v * factor, v * factor]);
            }
            SymMatrix::sparse(CsrMatrix::from_triplets(n, &rows, &cols, &vals))
        }
    }
}

fn offset(a: &SymMatrix, b: &DVector<f64>, x0: &DVector<f64>, feasible: bool, rng: &mut SplitMix64) -> f64 {
    if feasible {
        -0.5 * a.quad_form(x0) - b.dot(x0)
    } else {
        rng.next_normal()
    }
}

/// Generates an instance and its starting point.
pub fn gen_qcqp(spec: &GeneratorSpec) -> Result<(Qcqp, DVector<f64>)> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = SplitMix64::new(spec.seed);

    let mu = rng.uniform(spec.mu_lo, spec.mu_hi);
    let g = random_matrix(spec, &mut rng);
    let q = gram_plus_shift(g, mu, n);
    let p = normals(n, &mut rng);
    let x0 = normals(n, &mut rng);

    let factor = spec.constraint_scale / (2.0 * std::f64::consts::SQRT_2);
    let mut constraints = Vec::with_capacity(spec.m);
    for _ in 0..spec.m {
        let a = symmetric_part(random_matrix(spec, &mut rng), factor, n);
        let b = normals(n, &mut rng);
        let c = offset(&a, &b, &x0, spec.feasible_start, &mut rng);
        constraints.push(QuadConstraint::new(a, b, c));
    }

    let mut problem = Qcqp::new(q, p, 0.0, constraints)?;
    for attempt in 0..=RESAMPLE_LIMIT {
        let s = sigma_min(&problem.jacobian(&x0));
        if s > RANK_THRESHOLD {
            return Ok((problem, x0));
        }
        if attempt == RESAMPLE_LIMIT {
            return Err(Error::Generator(format!(
                "sigma_min(J(x0)) = {s:e} after {RESAMPLE_LIMIT} redraws; the generator settings are degenerate"
            )));
        }
        log::debug!("sigma_min(J(x0)) = {s:e}, redrawing linear terms");
        for con in &mut problem.constraints {
            con.b = normals(n, &mut rng);
            con.c = offset(&con.a, &con.b, &x0, spec.feasible_start, &mut rng);
        }
    }
    unreachable!()
}
