//! Property tests over seeded instances and random inputs.

use lal_core::bench::{gen_qcqp, performance_profile, BenchResult, GeneratorSpec, Metric};
use lal_core::fixtures;
use lal_core::io::ProblemFile;
use lal_core::rng::SplitMix64;
use lal_core::scp::{scp_solve, ScpConfig};
use lal_core::theory::{
    alpha_hat, beta_interval_large, c1, c2, gamma_k, gamma_of_beta, lpsi_bound_from_norms, rate_fit_errors,
    rho_lower_bound, TheoryParams,
};
use lal_core::{
    check_derivatives, estimate_constants, solve, stationarity, BetaPolicy, InstanceConstants, NlpOracle, SolverConfig,
    Status,
};
use nalgebra::DVector;
use proptest::prelude::*;

fn normals(n: usize, rng: &mut SplitMix64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.next_normal())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn constants() -> impl Strategy<Value = InstanceConstants> {
    (0.1..10.0f64, 0.0..10.0f64, 0.1..10.0f64, 0.0..10.0f64, 0.1..5.0f64)
        .prop_map(|(m_f, l_f, m_jac, l_jac, s)| InstanceConstants::uniform(m_f, l_f, m_jac, l_jac, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn qcqp_derivatives_match_finite_differences(seed in 0u64..1000, n in 2usize..12) {
        let (p, _) = gen_qcqp(&GeneratorSpec::new(n, 1 + n / 3, seed)).unwrap();
        let report = check_derivatives(&p, 100, seed ^ 0x5eed).unwrap();
        prop_assert!(report.passed, "{report:?}");
    }

    #[test]
    fn constants_monotone_in_sample_set(seed in 0u64..1000, extra in 1usize..5) {
        let (p, x0) = gen_qcqp(&GeneratorSpec::new(8, 3, seed)).unwrap();
        let mut rng = SplitMix64::new(seed);
        let mut pts = vec![x0.clone(), &x0 + normals(8, &mut rng) * 0.1];
        let small = estimate_constants(&p, &pts).unwrap().constants;
        for _ in 0..extra {
            pts.push(normals(8, &mut rng));
        }
        let big = estimate_constants(&p, &pts).unwrap().constants;
        prop_assert!(big.m_f.value >= small.m_f.value);
        prop_assert!(big.m_jac.value >= small.m_jac.value);
        prop_assert!(big.l_f.value >= small.l_f.value);
        prop_assert!(big.l_jac.value >= small.l_jac.value);
        prop_assert!(big.sigma.value <= small.sigma.value);
    }

    #[test]
    fn stationarity_is_a_pure_function(seed in 0u64..1000) {
        let (p, x) = gen_qcqp(&GeneratorSpec::new(6, 2, seed)).unwrap();
        let lambda = normals(2, &mut SplitMix64::new(seed + 1));
        let a = stationarity(&p, &x, &lambda).unwrap();
        let b = stationarity(&p.clone(), &x.clone(), &lambda.clone()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn closed_forms_match_independent_formulas(c in constants(), beta in 0.01..100.0f64, rho in 1.0..1e8f64) {
        let (m_f, l_f, m_jac, l_jac, s) = (c.m_f.value, c.l_f.value, c.m_jac.value, c.l_jac.value, c.sigma.value);
        let c1_ref = 2.0 * (l_f + beta) * (l_f + beta) / (s * s);
        let inner = m_f * l_jac + (2.0 * m_jac + s) * beta;
        let c2_ref = 2.0 * inner * inner / (s * s * s * s);
        prop_assert!(rel_close(c1(beta, l_f, s), c1_ref, 1e-12));
        prop_assert!(rel_close(c2(beta, m_f, l_jac, m_jac, s), c2_ref, 1e-12));
        // eta = 2: rho^((eta-1)/eta) = sqrt(rho)
        let gamma_ref = 4.0 * (1.0 / (2.0 * rho.sqrt()) + 1.0 / rho) * c1_ref.max(c2_ref);
        prop_assert!(rel_close(gamma_k(beta, rho, 2.0, &c), gamma_ref, 1e-12));
        let big_ref = (m_jac + 1.0 / rho) * (m_f * l_jac + m_jac * l_f + (3.0 * m_jac + s) * beta) / (s * s)
            + 2.0 * m_jac * (rho * m_jac + 1.0);
        prop_assert!(rel_close(gamma_of_beta(beta, rho, &c), big_ref, 1e-12));
        let w = [beta, rho.sqrt()];
        let lpsi_ref = l_jac * w[0].max(w[1]) + m_jac * (2.0 + rho * m_jac);
        prop_assert!(rel_close(lpsi_bound_from_norms(&w, rho, l_jac, m_jac).unwrap(), lpsi_ref, 1e-12));
        let lam = DVector::from_row_slice(&[beta, -1.0]);
        let ah_ref = 4.0 * m_f + 4.0 * l_f - 3.0 * s + 8.0 * (beta * beta + 1.0) + 3.0;
        prop_assert!(rel_close(alpha_hat(m_f, l_f, s, &lam), ah_ref, 1e-12));
    }

    #[test]
    fn rho_bound_matches_independent_formula(c in constants(), d_s in 0.1..10.0f64, delta in 1.5..20.0f64) {
        let (m_f, _, m_jac, l_jac, s) = (c.m_f.value, c.l_f.value, c.m_jac.value, c.l_jac.value, c.sigma.value);
        let alpha = 0.5;
        let params = TheoryParams { delta, delta_prime: None, alpha, eta: 2.0 };
        let got = rho_lower_bound(&c, &params, Some(d_s)).unwrap();
        let t1 = (4.0 * m_jac * m_jac / (s * s)).powi(2);
        let t2 = (48.0 * (delta + 1.0) * (2.0 * m_jac + s) * m_f * l_jac / (alpha * s.powi(4))).powi(2);
        let t4 = ((m_f * (2.0 * m_jac + s) + 2.0 * delta * m_f * l_jac * d_s) / (2f64.sqrt() * s * (2.0 * m_jac + s))).powi(2);
        prop_assert!(rel_close(got, t1.max(t2).max(t4), 1e-12));
    }

    #[test]
    fn gamma_within_half_alpha_beta_on_admissible_interval(frac in 0.0..=1.0f64, delta in 1.5..50.0f64) {
        let c = InstanceConstants::uniform(1.0, 1.0, 1.0, 1.0, 1.0);
        let params = TheoryParams { delta, delta_prime: None, ..TheoryParams::default() };
        let rho = rho_lower_bound(&c, &params, Some(1.0)).unwrap();
        let (lo, hi) = beta_interval_large(&c, delta);
        let beta = lo + frac * (hi - lo);
        let g = gamma_k(beta, rho, params.eta, &c);
        prop_assert!(g <= 0.5 * params.alpha * beta * (1.0 + 1e-12), "gamma {g} > alpha beta / 2 at beta {beta}");
    }

    #[test]
    fn rate_fit_is_scale_invariant(q in 0.3..0.9f64, power in 0.5..3.0f64, scale in 1e-6..1e6f64, geometric: bool) {
        let ks: Vec<f64> = (1..=80).map(f64::from).collect();
        let e: Vec<f64> = ks.iter().map(|k| if geometric { q.powf(*k) } else { k.powf(-power) }).collect();
        let scaled: Vec<f64> = e.iter().map(|v| v * scale).collect();
        let a = rate_fit_errors(&ks, &e, 0.0, None);
        let b = rate_fit_errors(&ks, &scaled, 0.0, None);
        prop_assert_eq!(a.regime, b.regime);
    }

    #[test]
    fn profiles_are_monotone_fractions(seed in 0u64..10_000) {
        let mut rng = SplitMix64::new(seed);
        let np = 1 + (rng.next_u64() % 10) as usize;
        let ns = 1 + (rng.next_u64() % 4) as usize;
        let mut rows = Vec::new();
        for p in 0..np {
            for s in 0..ns {
                rows.push(BenchResult {
                    problem: format!("p{p}"),
                    solver: format!("s{s}"),
                    status: if rng.next_f64() < 0.7 { Status::Converged } else { Status::MaxIter },
                    iters: (rng.next_u64() % 50) as usize,
                    time_s: rng.uniform(0.0, 5.0),
                    f_final: 0.0,
                    feas_norm: 0.0,
                    stat_norm: 0.0,
                    message: None,
                });
            }
        }
        for metric in [Metric::Time, Metric::Iters] {
            let prof = performance_profile(&rows, metric).unwrap();
            for c in &prof.curves {
                prop_assert!(c.points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
                prop_assert!(c.points.iter().all(|&(t, f)| t >= 1.0 && (0.0..=1.0).contains(&f)));
            }
        }
    }

    #[test]
    fn problem_file_round_trip_preserves_evaluations(seed in 0u64..1000) {
        let (p, x0) = gen_qcqp(&GeneratorSpec { density: 0.5, ..GeneratorSpec::new(7, 3, seed) }).unwrap();
        let mut file = ProblemFile::new(p.clone());
        file.x0 = Some(x0);
        let back = ProblemFile::from_json(&file.to_json().unwrap()).unwrap().problem;
        let mut rng = SplitMix64::new(seed);
        for _ in 0..10 {
            let x = normals(7, &mut rng);
            prop_assert!((p.objective(&x) - back.objective(&x)).abs() <= 1e-15 * (1.0 + p.objective(&x).abs()));
            prop_assert!((p.constraints(&x) - back.constraints(&x)).amax() <= 1e-15 * (1.0 + p.constraints(&x).amax()));
            prop_assert!((p.gradient(&x) - back.gradient(&x)).amax() <= 1e-15 * (1.0 + p.gradient(&x).amax()));
        }
    }

    #[test]
    fn generator_is_deterministic(seed in 0u64..1000, n in 2usize..15) {
        let spec = GeneratorSpec::new(n, 1 + n / 2, seed);
        prop_assert_eq!(gen_qcqp(&spec).unwrap(), gen_qcqp(&spec).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scp_keeps_linearized_feasibility(seed in 0u64..1000) {
        let (p, x0) = gen_qcqp(&GeneratorSpec::new(10, 4, seed)).unwrap();
        let r = scp_solve(&p, &x0, &ScpConfig { max_iter: 50, ..ScpConfig::default() }).unwrap();
        for w in r.trace.windows(2) {
            let (xk, x1) = (w[0].x_vec(), w[1].x_vec());
            let fk = p.constraints(&xk);
            let lin = p.jacobian(&xk) * (&x1 - &xk) + &fk;
            prop_assert!(lin.norm() <= 1e-8 * (1.0 + fk.norm()), "{}", lin.norm());
        }
    }

    #[test]
    fn dual_update_matches_linearized_constraint(seed in 0u64..1000) {
        let (p, x0) = gen_qcqp(&GeneratorSpec::new(8, 3, seed)).unwrap();
        let cfg = SolverConfig { max_iter: 30, beta: BetaPolicy::Backtracking { init: 1.0, eta: 2.0, min: 1e-8, max: 1e12 }, ..SolverConfig::default() };
        let r = solve(&p, &x0, &DVector::zeros(3), &cfg).unwrap();
        for w in r.trace.windows(2) {
            let (xk, x1) = (w[0].x_vec(), w[1].x_vec());
            let expected = w[0].lambda_vec() + (p.constraints(&xk) + p.jacobian(&xk) * (&x1 - &xk)) * r.rho;
            let got = w[1].lambda_vec();
            prop_assert!((&got - &expected).amax() <= 1e-12 * (1.0 + expected.amax()));
        }
    }

    #[test]
    fn running_min_of_stationarity_is_nonincreasing(seed in 0u64..1000) {
        let (p, x0) = gen_qcqp(&GeneratorSpec::new(12, 5, seed)).unwrap();
        let r = solve(&p, &x0, &DVector::zeros(5), &SolverConfig { max_iter: 60, ..SolverConfig::default() }).unwrap();
        let mut best = f64::INFINITY;
        for t in &r.trace {
            let next = best.min(t.grad_lag_norm());
            prop_assert!(next <= best);
            best = next;
        }
    }
}

/// With affine constraints and convex `f` both methods are proximal schemes
/// on the same convex problem.
#[test]
fn lal_and_scp_agree_on_affine_constraints() {
    let p = fixtures::quadratic_two_linear();
    let x0 = DVector::from_row_slice(&[0.5, -0.5, 1.0, 0.0]);
    let tight = SolverConfig { eps1: 1e-14, eps2: 1e-12, eps_stat: Some(1e-10), ..SolverConfig::default() };
    let a = solve(&p, &x0, &DVector::zeros(2), &tight).unwrap();
    let b = scp_solve(&p, &x0, &ScpConfig { eps1: 1e-14, eps2: 1e-12, eps_stat: Some(1e-10), ..ScpConfig::default() }).unwrap();
    assert_eq!(a.status, Status::Converged);
    assert_eq!(b.status, Status::Converged);
    assert!((a.final_objective() - b.final_objective()).abs() <= 1e-6, "{} vs {}", a.final_objective(), b.final_objective());
}
