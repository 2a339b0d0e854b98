//! Dolan-More performance profiles.
//!
//! `r_{p,s} = t_{p,s} / min_s' t_{p,s'}` over successful (`Converged`) runs;
//! failed runs get `r = inf`. `P_s(tau)` is the fraction of problems with
//! `r_{p,s} <= tau`. A best metric of exactly zero gives `r = 1` to every run
//! that also scored zero and `r = inf` otherwise.

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::Serialize;

use super::suite::BenchResult;
use crate::error::{Error, Result};
use crate::solver::Status;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Time,
    Iters,
}

impl Metric {
    fn of(&self, r: &BenchResult) -> f64 {
        match self {
            Metric::Time => r.time_s,
            Metric::Iters => r.iters as f64,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Metric::Time),
            "iters" | "iterations" => Ok(Metric::Iters),
            other => Err(Error::Config(format!("unknown metric {other:?}, expected time or iters"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileCurve {
    pub solver: String,
    /// `(tau, fraction)` at every breakpoint, `tau` increasing.
    pub points: Vec<(f64, f64)>,
}

impl ProfileCurve {
    /// Step-function value `P_s(tau)`.
    pub fn fraction_at(&self, tau: f64) -> f64 {
        self.points.iter().take_while(|(t, _)| *t <= tau).last().map_or(0.0, |&(_, f)| f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub curves: Vec<ProfileCurve>,
    /// Problems no solver finished; left out of every curve.
    pub excluded: Vec<String>,
}

fn first_seen<'a>(keys: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for k in keys {
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

/// Profiles for every solver, in order of first appearance.
pub fn performance_profile(results: &[BenchResult], metric: Metric) -> Result<Profile> {
    let problems = first_seen(results.iter().map(|r| r.problem.as_str()));
    let solvers = first_seen(results.iter().map(|r| r.solver.as_str()));
    if problems.is_empty() || solvers.is_empty() {
        return Err(Error::Config("performance profile needs at least one result".into()));
    }
    let value = |p: &str, s: &str| {
        results
            .iter()
            .find(|r| r.problem == p && r.solver == s && r.status == Status::Converged)
            .map(|r| metric.of(r))
            .filter(|v| v.is_finite() && *v >= 0.0)
    };

    let mut excluded = Vec::new();
    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); solvers.len()];
    for &p in &problems {
        let vals: Vec<Option<f64>> = solvers.iter().map(|&s| value(p, s)).collect();
        let Some(best) = vals.iter().flatten().copied().reduce(f64::min) else {
            log::warn!("no solver succeeded on {p}; excluded from the profile");
            excluded.push(p.to_string());
            continue;
        };
        for (s, v) in vals.iter().enumerate() {
            let r = match *v {
                None => f64::INFINITY,
                Some(v) if v == best => 1.0,
                Some(_) if best == 0.0 => f64::INFINITY,
                Some(v) => v / best,
            };
            ratios[s].push(r);
        }
    }

    let counted = problems.len() - excluded.len();
    let mut taus: Vec<f64> = ratios
        .iter()
        .flatten()
        .filter(|r| r.is_finite())
        .map(|r| r.to_bits())
        .collect::<BTreeSet<u64>>()
        .into_iter()
        .map(f64::from_bits)
        .collect();
    taus.sort_by(f64::total_cmp);
    if taus.first() != Some(&1.0) {
        taus.insert(0, 1.0);
    }

    let curves = solvers
        .iter()
        .zip(&ratios)
        .map(|(&s, rs)| {
            let points = taus
                .iter()
                .map(|&t| {
                    let hit = rs.iter().filter(|&&r| r <= t).count();
                    let frac = if counted == 0 { 0.0 } else { hit as f64 / counted as f64 };
                    (t, frac)
                })
                .collect();
            ProfileCurve { solver: s.to_string(), points }
        })
        .collect();
    Ok(Profile { curves, excluded })
}

/// Long format: `solver,tau,fraction`.
pub fn write_profile_csv<W: std::io::Write>(out: W, profile: &Profile) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["solver", "tau", "fraction"])?;
    for c in &profile.curves {
        for (t, f) in &c.points {
            w.write_record([c.solver.clone(), t.to_string(), f.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
