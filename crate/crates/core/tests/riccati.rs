mod common;

use singular_lq::coefficients::*;
use singular_lq::lattice::*;
use singular_lq::riccati::*;

fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

fn setup(n: usize, nu: f64, kappa: f64, eta: f64) -> (ScenarioTree, CoefficientSet) {
    let t = ScenarioTree::build(TimeGrid::new(1.0, n).unwrap(), 2, 0).unwrap();
    let s = CoefficientSpecs {
        nu: ModelSpec::constant(nu),
        kappa: ModelSpec::constant(kappa),
        xi: ModelSpec::constant(0.0),
        xi_t: ModelSpec::constant(0.0),
        eta: ModelSpec::constant(eta),
    };
    let c = CoefficientSet::materialize(&t, &s, 1.0).unwrap();
    (t, c)
}

#[test]
fn closed_form_examples() {
    let c = closed_form_constant(1.0, 1.0, Penalty::Infinite, 0.0, 1.0).unwrap();
    assert!((c - 1.0 / 1f64.tanh()).abs() < 1e-15);
    assert!((c - 1.313_035_285_499_331_3).abs() < 1e-12);
    let c = closed_form_constant(1.0, 1.0, Penalty::Finite(0.0), 0.0, 1.0).unwrap();
    assert!((c - 0.761_594_155_955_764_9).abs() < 1e-12);
    let c = closed_form_constant(0.0, 1.0, Penalty::Infinite, 0.0, 1.0).unwrap();
    assert_eq!(c, 1.0);
    assert!(closed_form_constant(1.0, 1.0, Penalty::Infinite, 1.0, 1.0).is_err());
    // continuity in eta
    let big = closed_form_constant(1.0, 2.0, Penalty::Finite(1e12), 0.3, 1.0).unwrap();
    let inf = closed_form_constant(1.0, 2.0, Penalty::Infinite, 0.3, 1.0).unwrap();
    assert!(rel_diff(big, inf) < 1e-10);
    let tiny = closed_form_constant(1e-14, 2.0, Penalty::Finite(3.0), 0.3, 1.0).unwrap();
    let zero = closed_form_constant(0.0, 2.0, Penalty::Finite(3.0), 0.3, 1.0).unwrap();
    assert!(rel_diff(tiny, zero) < 1e-10);
}

#[test]
fn single_step_truncation() {
    let (t, c) = setup(1, 0.0, 1.0, f64::INFINITY);
    let dt = t.grid().dt();
    for n in [1.0, 10.0, 1e3, 1e8] {
        let s = solve_discrete_bsrde(&t, &c, n).unwrap();
        let want = n / (1.0 + n * dt);
        assert!(rel_diff(s.root(), want) < 1e-15);
    }
    let lim = solve_minimal_limit(&t, &c).unwrap();
    assert_eq!(lim.root(), 1.0 / dt);
}

#[test]
fn zero_terminal_weight() {
    let (t, c) = setup(4, 1.0, 1.0, 0.0);
    let s = solve_discrete_bsrde(&t, &c, 0.0).unwrap();
    let dt = t.grid().dt();
    // c_{N-1} is the one-step weight with nothing behind it
    for id in t.level(3) {
        assert!(rel_diff(s.c.values[id], dt / (1.0 + dt * dt)) < 1e-15);
    }
    assert!(s.min_value() > 0.0);
    assert!(solve_discrete_bsrde(&t, &c, f64::INFINITY).is_err());
}

#[test]
fn ode_matches_closed_form() {
    let g = TimeGrid::new(1.0, 20).unwrap();
    let ones = vec![1.0; 21];
    let ode = solve_ode_deterministic(&ones, &ones, Penalty::Infinite, &g).unwrap();
    for k in 0..20 {
        let cf = closed_form_constant(1.0, 1.0, Penalty::Infinite, g.time(k), 1.0).unwrap();
        assert!(rel_diff(ode.c[k], cf) < 1e-8, "k={k}");
    }
    let ode = solve_ode_deterministic(&ones, &ones, Penalty::Finite(2.0), &g).unwrap();
    for k in 0..=20 {
        let cf = if k == 20 {
            2.0
        } else {
            closed_form_constant(1.0, 1.0, Penalty::Finite(2.0), g.time(k), 1.0).unwrap()
        };
        assert!(rel_diff(ode.c[k], cf) < 1e-8);
    }
}

#[test]
fn ode_separable_case() {
    // kappa linear in t, nu = 0: c = 1/(1/eta + int_t^T ds/kappa)
    let n = 16;
    let g = TimeGrid::new(2.0, n).unwrap();
    let kappa: Vec<f64> = g.times().iter().map(|t| 1.0 + 0.5 * t).collect();
    let zeros = vec![0.0; n + 1];
    let ode = solve_ode_deterministic(&zeros, &kappa, Penalty::Finite(3.0), &g).unwrap();
    for k in 0..=n {
        let t = g.time(k);
        let integral = 2.0 * ((1.0 + 0.5 * 2.0) / (1.0 + 0.5 * t)).ln();
        let want = 1.0 / (1.0 / 3.0 + integral);
        assert!(rel_diff(ode.c[k], want) < 1e-8, "k={k}");
    }
    let ode = solve_ode_deterministic(&zeros, &kappa, Penalty::Finite(0.0), &g).unwrap();
    assert!(ode.c.iter().all(|&v| v == 0.0));
}

#[test]
fn l_process_small_cases() {
    let (t, c) = setup(1, 1.0, 1.0, 2.0);
    let r = solve_minimal_limit(&t, &c).unwrap();
    let l = compute_l(&t, &c, &r).unwrap();
    assert_eq!(l.l.values[0], r.root());

    let (t, c) = setup(6, 1.0, 1.0, f64::INFINITY);
    let r = solve_minimal_limit(&t, &c).unwrap();
    let l = compute_l(&t, &c, &r).unwrap();
    let dt = t.grid().dt();
    for (id, d) in l.drift(&t).iter().enumerate() {
        let next_d = l.discount[id] * r.retention[id];
        assert!((d + next_d * dt).abs() < 1e-13);
    }
    assert_eq!(l.supermartingale_violation(&t), 0.0);
}

#[test]
fn bounds_constant_examples() {
    let (t, c) = setup(5, 0.0, 2.0, f64::INFINITY);
    let r = solve_minimal_limit(&t, &c).unwrap();
    let b = check_bounds(&t, &c, &r, true).unwrap();
    let g = t.grid();
    for id in 0..t.prefix_len(4) {
        let tau = g.time_to_go(t.node(id).level);
        assert!(rel_diff(r.c.values[id], 2.0 / tau) < 1e-14);
    }
    assert_eq!(b.lower_side.violations, 0);
    assert_eq!(b.upper_side.unwrap().violations, 0);

    let (t, c) = setup(5, 1.0, 1.0, f64::INFINITY);
    let r = solve_minimal_limit(&t, &c).unwrap();
    let b = check_bounds(&t, &c, &r, false).unwrap();
    assert!(rel_diff(b.lower[0], 1.0) < 1e-14);
    assert!(b.lower_side.min_margin > 0.0 || b.lower_side.violations == 0);
}

#[test]
fn integrability_deterministic_is_zero() {
    let (t, c) = setup(5, 1.0, 1.0, f64::INFINITY);
    let r = solve_minimal_limit(&t, &c).unwrap();
    let rep = check_integrability_condition(&t, &c, &r);
    assert!(!rep.vacuous);
    assert_eq!(rep.max, 0.0);
    let (t, c) = setup(5, 1.0, 1.0, 3.0);
    let r = solve_minimal_limit(&t, &c).unwrap();
    assert!(check_integrability_condition(&t, &c, &r).vacuous);
}

mod properties {
    use super::common::{case, rel};
    use proptest::prelude::*;
    use singular_lq::oracle::{dp_solve, OracleMode};
    use singular_lq::riccati::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn weight_is_positive_and_self_consistent(case in case()) {
            let (t, c) = case.build();
            for tr in [Truncation::Level(3.0), Truncation::MinimalLimit] {
                let s = solve(&t, &c, tr).unwrap();
                prop_assert!(s.min_value() > 0.0);
                prop_assert!(s.self_consistency(&t, &c) <= 1e-12);
                prop_assert!(s.martingale_mean_defect(&t) <= 1e-12);
            }
        }

        #[test]
        fn monotone_in_truncation_and_below_limit(case in case()) {
            let (t, c) = case.build();
            let levels = [0.5, 1.0, 4.0, 30.0, 1e3];
            let m = minimal_supersolution(&t, &c, &levels).unwrap();
            prop_assert!(m.root_sequence.windows(2).all(|w| w[0].1 <= w[1].1));
            let lim = solve_minimal_limit(&t, &c).unwrap();
            for (a, b) in m.solution.c.values.iter().zip(&lim.c.values) {
                prop_assert!(*a <= *b * (1.0 + 1e-14));
            }
            if let Some(l) = &m.limit {
                prop_assert!(m.oracle_gap <= 1e-12);
                prop_assert!(l.root() >= m.solution.root());
            }
        }

        #[test]
        fn truncated_twin_of_the_oracle(case in case(), n in 0.1..50.0f64) {
            let (t, c) = case.build();
            let s = solve_discrete_bsrde(&t, &c, n).unwrap();
            let dp = dp_solve(&t, &c, OracleMode::Truncated(n)).unwrap();
            for (a, b) in s.c.values.iter().zip(&dp.alpha) {
                prop_assert!(rel(*a, *b) <= 1e-12);
            }
        }

        #[test]
        fn discounted_weight_is_a_supermartingale(case in case()) {
            let (t, c) = case.build();
            let s = solve_minimal_limit(&t, &c).unwrap();
            let l = compute_l(&t, &c, &s).unwrap();
            prop_assert!(l.supermartingale_violation(&t) <= 1e-12);
            prop_assert!(l.l.values.iter().all(|v| *v > 0.0));
            // E[L_{k+1} | k] - L_k = -D_{k+1} nu dt exactly
            let dt = t.grid().dt();
            let drift = l.drift(&t);
            for id in 0..drift.len() {
                let want = -l.discount[id] * s.retention[id] * c.nu.values[id] * dt;
                prop_assert!((drift[id] - want).abs() <= 1e-12 * 1f64.max(l.l.values[id]));
            }
        }

        #[test]
        fn lower_bound_holds(case in case()) {
            let (t, c) = case.build();
            let s = solve_minimal_limit(&t, &c).unwrap();
            let b = check_bounds(&t, &c, &s, false).unwrap();
            prop_assert_eq!(b.lower_side.violations, 0);
            prop_assert!(b.lower.iter().all(|v| *v > 0.0));
        }

        #[test]
        fn integrability_sums_are_finite(case in case()) {
            let (t, c) = case.build();
            let s = solve_minimal_limit(&t, &c).unwrap();
            let r = check_integrability_condition(&t, &c, &s);
            prop_assert!(r.max.is_finite() && r.mean.is_finite());
            prop_assert!(r.mean <= r.max * (1.0 + 1e-12));
            prop_assert_eq!(r.vacuous, !c.has_infinite_penalty());
        }
    }
}
