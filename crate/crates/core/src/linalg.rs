//! Dense/sparse symmetric matrices and the few factorizations the solvers need.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Problems with `n` above this size keep sparse input sparse; below it
/// everything is densified on load.
pub const DENSE_LIMIT: usize = 2000;

/// Compressed sparse row storage of a square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n x n` matrix from coordinate triplets. Duplicates are summed.
    pub fn from_triplets(n: usize, rows: &[usize], cols: &[usize], vals: &[f64]) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = rows
            .iter()
            .zip(cols)
            .zip(vals)
            .map(|((&r, &c), &v)| (r, c, v))
            .collect();
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_ptr = vec![0usize; n + 1];
        let mut out_cols = Vec::with_capacity(entries.len());
        let mut out_vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *out_vals.last_mut().unwrap() += v;
                continue;
            }
            out_cols.push(c);
            out_vals.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, cols: out_cols, vals: out_vals }
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, row_ptr: vec![0; n + 1], cols: Vec::new(), vals: Vec::new() }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Iterates `(row, col, value)` over stored entries.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |idx| (r, self.cols[idx], self.vals[idx]))
        })
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[idx] * x[self.cols[idx]];
            }
            y[r] = acc;
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let (rows, (cols, vals)): (Vec<_>, (Vec<_>, Vec<_>)) =
            self.triplets().map(|(r, c, v)| (c, (r, v))).unzip();
        Self::from_triplets(self.n, &rows, &cols, &vals)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}

/// A symmetric `n x n` matrix in dense or sparse storage.
#[derive(Debug, Clone, PartialEq)]
pub enum SymMatrix {
    Dense(DMatrix<f64>),
    Sparse(CsrMatrix),
}

impl SymMatrix {
    /// Symmetrizes `(M + M^T) / 2`.
    pub fn dense(m: DMatrix<f64>) -> Self {
        let sym = (&m + m.transpose()) * 0.5;
        SymMatrix::Dense(sym)
    }

    /// Symmetrizes sparse input; densifies when `n` is at most [`DENSE_LIMIT`].
    pub fn sparse(m: CsrMatrix) -> Self {
        if m.nrows() <= DENSE_LIMIT {
            return SymMatrix::dense(m.to_dense());
        }
        let t = m.transpose();
        let (rows, (cols, vals)): (Vec<_>, (Vec<_>, Vec<_>)) = m
            .triplets()
            .chain(t.triplets())
            .map(|(r, c, v)| (r, (c, 0.5 * v)))
            .unzip();
        SymMatrix::Sparse(CsrMatrix::from_triplets(m.nrows(), &rows, &cols, &vals))
    }

    pub fn zeros(n: usize) -> Self {
        if n <= DENSE_LIMIT {
            SymMatrix::Dense(DMatrix::zeros(n, n))
        } else {
            SymMatrix::Sparse(CsrMatrix::zeros(n))
        }
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix::Dense(DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        match self {
            SymMatrix::Dense(m) => m.nrows(),
            SymMatrix::Sparse(m) => m.nrows(),
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, SymMatrix::Sparse(_))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            SymMatrix::Dense(m) => m * x,
            SymMatrix::Sparse(m) => m.mul_vec(x),
        }
    }

    /// `x^T M x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.mul_vec(x))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SymMatrix::Dense(m) => m.clone(),
            SymMatrix::Sparse(m) => m.to_dense(),
        }
    }

    /// Adds `self` into a dense accumulator.
    pub fn add_to(&self, acc: &mut DMatrix<f64>) {
        match self {
            SymMatrix::Dense(m) => *acc += m,
            SymMatrix::Sparse(m) => {
                for (r, c, v) in m.triplets() {
                    acc[(r, c)] += v;
                }
            }
        }
    }

    /// Spectral norm. Exact eigen-decomposition for dense storage, power
    /// iteration for sparse storage.
    pub fn spectral_norm(&self) -> f64 {
        match self {
            SymMatrix::Dense(m) => sym_spectral_norm(m),
            SymMatrix::Sparse(_) => power_norm(self.dim(), |v| self.mul_vec(v)),
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let d = self.to_dense();
        SymmetricEigen::new(d).eigenvalues.min()
    }
}

pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.amax()
}

/// Largest |eigenvalue| of a symmetric operator by power iteration.
pub fn power_norm(n: usize, apply: impl Fn(&DVector<f64>) -> DVector<f64>) -> f64 {
    if n == 0 {
        return 0.0;
    }
    // deterministic, not aligned with any coordinate axis
    let mut v = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 101) as f64 / 101.0);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..500 {
        let w = apply(&v);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - estimate).abs() <= 1e-12 * norm;
        estimate = norm;
        v = w / norm;
        if converged {
            break;
        }
    }
    estimate
}

/// Singular values of a (typically wide) matrix `J`, largest first, computed
/// from the eigenvalues of `J J^T`.
pub fn singular_values_wide(j: &DMatrix<f64>) -> Vec<f64> {
    if j.nrows() == 0 {
        return Vec::new();
    }
    if j.nrows() <= j.ncols() {
        // a thin SVD on J^T is accurate and cheap when m is small
        let svd = j.transpose().svd(false, false);
        let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    } else {
        let mut s: Vec<f64> = j.clone().svd(false, false).singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }
}

/// Spectral norm of a rectangular matrix.
pub fn spectral_norm(j: &DMatrix<f64>) -> f64 {
    singular_values_wide(j).first().copied().unwrap_or(0.0)
}

/// The m-th singular value of an `m x n` Jacobian with `m <= n`; zero if
/// the matrix has fewer than `m` nonzero singular values.
pub fn sigma_min(j: &DMatrix<f64>) -> f64 {
    let s = singular_values_wide(j);
    if s.len() < j.nrows() {
        return 0.0;
    }
    s.last().copied().unwrap_or(0.0)
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Plain conjugate gradients for a symmetric positive-definite operator.
/// Stops when `||b - A x|| <= rel_tol * ||b||`. Reports non-convergence when a
/// direction of non-positive curvature is met.
pub fn conjugate_gradient(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    rel_tol: f64,
    max_iter: usize,
) -> CgOutcome {
    let n = b.len();
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return CgOutcome { x, iterations: 0, residual: 0.0, converged: true };
    }
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    for it in 0..max_iter {
        let ap = apply(&p);
        let curv = p.dot(&ap);
        if curv <= 0.0 || !curv.is_finite() {
            return CgOutcome { x, iterations: it, residual: rs.sqrt(), converged: false };
        }
        let step = rs / curv;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= rel_tol * b_norm {
            return CgOutcome { x, iterations: it + 1, residual: rs_new.sqrt(), converged: true };
        }
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    CgOutcome { x, iterations: max_iter, residual: rs.sqrt(), converged: false }
}
