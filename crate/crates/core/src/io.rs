//! Problem files (JSON), trace CSVs with a JSON sidecar of full iterates,
//! and bench result tables.
//!
//! Matrices in problem files are a flat row-major array of `n * n` numbers,
//! an array of rows, or sparse triplets `{"rows", "cols", "vals"}` with
//! 0-based indices (duplicates summed). Every matrix is symmetrized on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, SymMatrix};
use crate::model::{ConstantsFile, Qcqp, QuadConstraint};
use crate::solver::{IterationRecord, RunReport};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixRepr {
    Sparse { rows: Vec<usize>, cols: Vec<usize>, vals: Vec<f64> },
    Nested(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl MatrixRepr {
    fn from_sym(m: &SymMatrix) -> Self {
        match m {
            SymMatrix::Dense(d) => {
                let n = d.nrows();
                MatrixRepr::Flat((0..n * n).map(|i| d[(i / n, i % n)]).collect())
            }
            SymMatrix::Sparse(s) => {
                let (mut rows, mut cols, mut vals) = (Vec::new(), Vec::new(), Vec::new());
                for (r, c, v) in s.triplets() {
                    rows.push(r);
                    cols.push(c);
                    vals.push(v);
                }
                MatrixRepr::Sparse { rows, cols, vals }
            }
        }
    }

    fn into_sym(self, n: usize, what: &str) -> Result<SymMatrix> {
        match self {
            MatrixRepr::Flat(v) => {
                if v.len() != n * n {
                    return Err(Error::Format(format!("{what}: expected {} entries, got {}", n * n, v.len())));
                }
                Ok(SymMatrix::dense(DMatrix::from_row_slice(n, n, &v)))
            }
            MatrixRepr::Nested(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Format(format!("{what}: expected {n} rows of length {n}")));
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                Ok(SymMatrix::dense(DMatrix::from_row_slice(n, n, &flat)))
            }
            MatrixRepr::Sparse { rows, cols, vals } => {
                if rows.len() != cols.len() || rows.len() != vals.len() {
                    return Err(Error::Format(format!("{what}: rows, cols and vals differ in length")));
                }
                if rows.iter().chain(&cols).any(|&i| i >= n) {
                    return Err(Error::Format(format!("{what}: triplet index out of range for n = {n}")));
                }
                Ok(SymMatrix::sparse(CsrMatrix::from_triplets(n, &rows, &cols, &vals)))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ObjectiveRepr {
    #[serde(rename = "Q")]
    q: MatrixRepr,
    p: Vec<f64>,
    #[serde(default)]
    c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConstraintRepr {
    #[serde(rename = "A")]
    a: MatrixRepr,
    b: Vec<f64>,
    #[serde(default)]
    c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProblemRepr {
    n: usize,
    m: usize,
    objective: ObjectiveRepr,
    constraints: Vec<ConstraintRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    constants: Option<ConstantsFile>,
}

/// A QCQP with optional starting point and constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemFile {
    pub problem: Qcqp,
    pub x0: Option<DVector<f64>>,
    pub lambda0: Option<DVector<f64>>,
    pub constants: Option<ConstantsFile>,
}

impl ProblemFile {
    pub fn new(problem: Qcqp) -> Self {
        Self { problem, x0: None, lambda0: None, constants: None }
    }

    /// `x0` from the file, else zero.
    pub fn start_x(&self) -> DVector<f64> {
        self.x0.clone().unwrap_or_else(|| DVector::zeros(self.problem.p.len()))
    }

    /// `lambda0` from the file, else zero.
    pub fn start_lambda(&self) -> DVector<f64> {
        self.lambda0.clone().unwrap_or_else(|| DVector::zeros(self.problem.constraints.len()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: ProblemRepr = serde_json::from_str(text)?;
        let n = repr.n;
        let vector = |v: Vec<f64>, len: usize, what: &str| {
            if v.len() != len {
                Err(Error::Format(format!("{what}: expected length {len}, got {}", v.len())))
            } else {
                Ok(DVector::from_vec(v))
            }
        };
        if repr.constraints.len() != repr.m {
            return Err(Error::Format(format!("m = {} but {} constraints listed", repr.m, repr.constraints.len())));
        }
        let q = repr.objective.q.into_sym(n, "objective.Q")?;
        let p = vector(repr.objective.p, n, "objective.p")?;
        let mut constraints = Vec::with_capacity(repr.m);
        for (i, con) in repr.constraints.into_iter().enumerate() {
            let a = con.a.into_sym(n, &format!("constraints[{i}].A"))?;
            let b = vector(con.b, n, &format!("constraints[{i}].b"))?;
            constraints.push(QuadConstraint::new(a, b, con.c));
        }
        let problem = Qcqp::new(q, p, repr.objective.c, constraints)?;
        Ok(Self {
            problem,
            x0: repr.x0.map(|v| vector(v, n, "x0")).transpose()?,
            lambda0: repr.lambda0.map(|v| vector(v, repr.m, "lambda0")).transpose()?,
            constants: repr.constants,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let p = &self.problem;
        let repr = ProblemRepr {
            n: p.p.len(),
            m: p.constraints.len(),
            objective: ObjectiveRepr { q: MatrixRepr::from_sym(&p.q), p: p.p.iter().copied().collect(), c: p.c },
            constraints: p
                .constraints
                .iter()
                .map(|c| ConstraintRepr { a: MatrixRepr::from_sym(&c.a), b: c.b.iter().copied().collect(), c: c.c })
                .collect(),
            x0: self.x0.as_ref().map(|v| v.iter().copied().collect()),
            lambda0: self.lambda0.as_ref().map(|v| v.iter().copied().collect()),
            constants: self.constants.clone(),
        };
        Ok(serde_json::to_string(&repr)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(self.to_json()?.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }
}

/// Trace CSV header, in column order.
pub const TRACE_COLUMNS: [&str; 12] = [
    "k",
    "f",
    "feas_norm",
    "grad_lag_x_norm",
    "grad_lag_lambda_norm",
    "beta",
    "gamma",
    "P",
    "dx_norm",
    "dlambda_norm",
    "descent_ok",
    "wall_time_s",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trace_csv<W: Write>(out: W, trace: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_COLUMNS)?;
    for r in trace {
        w.write_record([
            r.k.to_string(),
            r.f.to_string(),
            r.feas_norm.to_string(),
            r.grad_lag_x_norm.to_string(),
            r.grad_lag_lambda_norm.to_string(),
            r.beta.to_string(),
            opt(r.gamma),
            opt(r.p),
            r.dx_norm.to_string(),
            r.dlambda_norm.to_string(),
            r.descent_ok.to_string(),
            r.wall_time_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Full iterates next to a trace CSV, for post-hoc certification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub solver: String,
    pub rho: f64,
    pub alpha: f64,
    pub records: Vec<IterationRecord>,
}

/// `<trace>.iterates.json`.
pub fn sidecar_path(trace: &Path) -> PathBuf {
    let mut name = trace.as_os_str().to_owned();
    name.push(".iterates.json");
    PathBuf::from(name)
}

/// Writes the CSV and its sidecar.
pub fn write_trace(path: &Path, solver: &str, alpha: f64, report: &RunReport) -> Result<()> {
    write_trace_csv(BufWriter::new(File::create(path)?), &report.trace)?;
    let side = TraceSidecar { solver: solver.to_string(), rho: report.rho, alpha, records: report.trace.clone() };
    let mut out = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer(&mut out, &side)?;
    out.flush()?;
    Ok(())
}

pub fn read_sidecar(trace: &Path) -> Result<TraceSidecar> {
    let path = sidecar_path(trace);
    let file = File::open(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn read_constants(path: &Path) -> Result<ConstantsFile> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
