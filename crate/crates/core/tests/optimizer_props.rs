#![allow(clippy::needless_range_loop)]

use fogcoop::chain;
use fogcoop::metrics::{model_ratios, MetricsReport};
use fogcoop::optimizer::{
    centralized_bisect, distance_from_optimum, fairness_matrix, fixed_point, g_residual,
    pareto_scan, ratio_slope, FixedPointOptions,
};
use fogcoop::{CoopVector, Exec, LoadVector};
use proptest::prelude::*;

fn distinct_loads(max_n: usize) -> impl Strategy<Value = LoadVector> {
    (2..=max_n)
        .prop_flat_map(|n| prop::collection::vec(0.2f64..1.6, n))
        .prop_filter("loads must be distinct", |v| {
            v.iter()
                .enumerate()
                .all(|(i, a)| v[i + 1..].iter().all(|b| (a - b).abs() > 0.05))
        })
        .prop_map(|v| LoadVector::new(v).unwrap())
}

fn loads_and_coop() -> impl Strategy<Value = (LoadVector, CoopVector)> {
    (2usize..=5).prop_flat_map(|n| {
        (
            prop::collection::vec(0.1f64..2.0, n),
            prop::collection::vec(0.0f64..=1.0, n),
        )
            .prop_map(|(l, p)| (LoadVector::new(l).unwrap(), CoopVector::new(p).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fairness_matrix_measures_flow_imbalance((l, p) in loads_and_coop()) {
        let n = l.len();
        let pi = chain::solve(&l, &p).unwrap();
        let f = fairness_matrix(&pi, &l).unwrap();
        let fp = f.apply(&p);
        let m = MetricsReport::from_steady_state(&pi, &l, &p).unwrap();
        for i in 0..n {
            let expected = (n - 1) as f64 * (m.r_out[i] - m.r_in[i]);
            prop_assert!((fp[i] - expected).abs() < 1e-10);
            let col: f64 = (0..n).map(|r| f.entry(r, i)).sum();
            prop_assert!(col.abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_point_is_fair_and_pins_heaviest(l in distinct_loads(5)) {
        let r = fixed_point(&l, FixedPointOptions::default()).unwrap();
        prop_assert!(r.converged && r.feasible);
        prop_assert_eq!(r.p_star[l.argmax()], 1.0);
        prop_assert!(g_residual(&l, &r.p_star).unwrap() < 1e-8);
        let m = MetricsReport::compute(&l, &r.p_star).unwrap();
        prop_assert!(m.convenient.iter().all(|&c| c));
    }

    #[test]
    fn solvers_agree(l in distinct_loads(4)) {
        let fp = fixed_point(&l, FixedPointOptions::default()).unwrap();
        let (bs, trace) = centralized_bisect(&l, 1e-7, 20_000).unwrap();
        prop_assert!(bs.converged);
        for j in 0..l.len() {
            prop_assert!((fp.p_star[j] - bs.p_star[j]).abs() < 1e-3);
        }
        for round in &trace.rounds {
            prop_assert!(round.p.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
            if let Some(j) = round.selected {
                prop_assert!(round.ratios[j].value().unwrap() >= 1.0 + 1e-7);
            }
        }
    }

    #[test]
    fn own_ratio_grows_with_own_cooperation((l, p) in loads_and_coop(), j in 0usize..5) {
        let j = j % l.len();
        let slope = ratio_slope(&l, &p, j, 1e-4).unwrap();
        let r = model_ratios(&l, &p).unwrap()[j];
        if r.is_defined() && !slope.is_nan() {
            prop_assert!(slope > 0.0, "slope {}", slope);
        }
    }
}

#[test]
fn pinning_below_one_costs_efficiency() {
    let l = LoadVector::new(vec![0.9, 0.8, 0.7, 0.6]).unwrap();
    let opts = FixedPointOptions::default();
    assert!(distance_from_optimum(&l, 1.0, opts).unwrap() < 1e-9);
    let mut last = 0.0;
    for pin in [0.9, 0.7, 0.5] {
        let d = distance_from_optimum(&l, pin, opts).unwrap();
        assert!(d > last);
        last = d;
    }
}

#[test]
fn pareto_scan_is_executor_independent() {
    let l = LoadVector::new(vec![0.9, 0.8]).unwrap();
    let seq = pareto_scan(&l, 15, Exec::Sequential).unwrap();
    let par = pareto_scan(&l, 15, Exec::Parallel).unwrap();
    assert_eq!(seq, par);
    assert_eq!(seq.len(), 225);
    assert_eq!((seq[1].p1, seq[1].p2), (0.0, 1.0 / 14.0));
    let l3 = LoadVector::new(vec![0.9, 0.8, 0.7]).unwrap();
    assert!(pareto_scan(&l3, 5, Exec::Sequential).is_err());
}

#[test]
fn bisection_step_budget_is_reported() {
    let l = LoadVector::new(vec![0.9, 0.8, 0.7, 0.6]).unwrap();
    let (r, trace) = centralized_bisect(&l, 1e-2, 3).unwrap();
    assert!(!r.converged && !r.feasible);
    assert_eq!(r.iterations, 3);
    assert!(trace.rounds.last().unwrap().selected.is_some());
    assert!(centralized_bisect(&l, 0.0, 10).is_err());
}
