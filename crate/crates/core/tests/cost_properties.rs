mod common;

use pathint::bench_gbm::{self, GbmSpec};
use pathint::cost::{self, WeightSet};
use pathint::sde::{simulate, Policy};
use pathint::stats::mean;
use proptest::collection::vec;
use proptest::prelude::*;

fn costs() -> impl Strategy<Value = Vec<f64>> {
    vec(prop_oneof![8 => -50.0f64..800.0, 1 => Just(f64::INFINITY)], 1..300)
        .prop_filter("at least one finite cost", |c| c.iter().any(|v| v.is_finite()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weights_average_to_one(c in costs()) {
        let w = WeightSet::from_costs(&c).unwrap();
        prop_assert!((mean(&w.weights) - 1.0).abs() <= 1e-10);
        prop_assert!((w.mean() - 1.0).abs() <= 1e-10);
        prop_assert!(w.weights.iter().all(|a| a.is_finite() && *a >= 0.0));
    }

    #[test]
    fn ess_identity_and_range(c in costs()) {
        let w = WeightSet::from_costs(&c).unwrap();
        prop_assert!(w.ess_fraction > 0.0 && w.ess_fraction <= 1.0 + 1e-12);
        prop_assert!((w.ess_fraction - 1.0 / (w.variance + 1.0)).abs() <= 1e-10 * w.ess_fraction.max(1.0));
        let m2 = mean(&w.weights.iter().map(|a| a * a).collect::<Vec<_>>());
        prop_assert!((w.variance - (m2 - 1.0)).abs() <= 1e-9 * m2.max(1.0));
    }

    #[test]
    fn equal_costs_give_full_ess(v in -100.0f64..1000.0, n in 1usize..200) {
        let w = WeightSet::from_costs(&vec![v; n]).unwrap();
        prop_assert!((w.ess_fraction - 1.0).abs() < 1e-12);
        prop_assert!(w.variance.abs() < 1e-12);
    }

    #[test]
    fn unequal_costs_lose_ess(c in vec(0.0f64..20.0, 2..100)) {
        let spread = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - c.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let w = WeightSet::from_costs(&c).unwrap();
        prop_assert!(w.ess_fraction < 1.0);
    }

    #[test]
    fn shifting_costs_shifts_value_only(c in vec(-20.0f64..40.0, 1..100), s in -500.0f64..500.0) {
        let a = WeightSet::from_costs(&c).unwrap();
        let shifted: Vec<f64> = c.iter().map(|v| v + s).collect();
        let b = WeightSet::from_costs(&shifted).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0));
        }
        prop_assert!((b.log_normalizer - (a.log_normalizer - s)).abs() <= 1e-9 * (1.0 + s.abs()));
    }

    #[test]
    fn value_is_below_mean_cost(c in vec(-20.0f64..40.0, 1..100)) {
        // Jensen: −log mean exp(−S) ≤ mean S
        let w = WeightSet::from_costs(&c).unwrap();
        prop_assert!(-w.log_normalizer <= mean(&c) + 1e-9);
    }
}

#[test]
fn all_infinite_costs_are_degenerate() {
    assert!(WeightSet::from_costs(&[f64::INFINITY; 4]).is_err());
    assert!(WeightSet::from_costs(&[]).is_err());
}

#[test]
fn bounds_are_ordered_and_vanish_at_the_reference() {
    let spec = GbmSpec { n_steps: 200, ..Default::default() };
    let p = bench_gbm::make_log_problem(&spec).unwrap();
    let u_star = bench_gbm::analytic_control_log(&spec);
    for pol in [Policy::Zero, bench_gbm::perturbed_control_log(&spec, 0.3).unwrap()] {
        let e = simulate(&p, &pol, 2000, 4).unwrap();
        let b = cost::variance_bounds(&e, &p, &u_star).unwrap();
        assert!(0.0 <= b.lower && b.lower <= b.upper, "{b:?}");
    }
    let e = simulate(&p, &u_star, 500, 4).unwrap();
    let b = cost::variance_bounds(&e, &p, &u_star).unwrap();
    assert_eq!((b.lower, b.upper), (0.0, 0.0));
}

#[test]
fn cost_parts_add_up() {
    let spec = GbmSpec { n_steps: 100, ..Default::default() };
    let p = bench_gbm::make_log_problem(&spec).unwrap();
    let e = simulate(&p, &bench_gbm::analytic_control_log(&spec), 200, 9).unwrap();
    for r in cost::path_costs(&e, &p).unwrap() {
        let sum = r.terminal + r.running + r.control + r.stochastic;
        assert!((sum - r.total).abs() < 1e-12 * (1.0 + r.total.abs()));
        assert_eq!(r.running, 0.0);
    }
}
