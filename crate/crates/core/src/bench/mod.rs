//! Benchmark harness: seeded QCQP instances, a parallel suite runner and
//! Dolan-More performance profiles.

mod gen;
mod profile;
mod suite;

pub use gen::{gen_qcqp, GeneratorSpec, RANK_THRESHOLD, RESAMPLE_LIMIT};
pub use profile::{performance_profile, write_profile_csv, Metric, Profile, ProfileCurve};
pub use suite::{
    default_suite, load_suite, read_results_csv, run_suite, write_results_csv, write_suite, BenchProblem, BenchResult,
    SolverKind, SolverSpec,
};
