use fogcoop::closed_form::{
    chain_blocking, derive_coeffs, diagonal_step_improves, fair_optimum, gradient_check,
    optimal_pair, undominated, ClosedForm, DEFAULT_FD_STEP,
};
use fogcoop::metrics::MetricsReport;
use fogcoop::LoadVector;
use proptest::prelude::*;

fn pair() -> impl Strategy<Value = LoadVector> {
    (0.1f64..2.0, 0.1f64..2.0).prop_map(|(a, b)| LoadVector::new(vec![a, b]).unwrap())
}

fn sorted_pair() -> impl Strategy<Value = LoadVector> {
    (0.1f64..2.0, 0.05f64..0.95)
        .prop_map(|(a, f)| LoadVector::new(vec![a, a * f]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn rational_form_matches_chain(l in pair()) {
        let cf = ClosedForm::new(&l).unwrap();
        for a in 0..21 {
            for b in 0..21 {
                let (p1, p2) = (a as f64 / 20.0, b as f64 / 20.0);
                let exact = chain_blocking(&l, p1, p2).unwrap();
                let closed = cf.blocking(p1, p2);
                prop_assert!((exact[0] - closed[0]).abs() < 1e-10);
                prop_assert!((exact[1] - closed[1]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn denominator_never_vanishes(l in pair()) {
        let c = derive_coeffs(&l).unwrap();
        for a in 0..=10 {
            for b in 0..=10 {
                prop_assert!(c.denominator(a as f64 / 10.0, b as f64 / 10.0) > 0.0);
            }
        }
    }

    #[test]
    fn optimum_is_fair_and_convenient(l in sorted_pair()) {
        let opt = optimal_pair(&l).unwrap();
        prop_assert!(!opt.swap_applied);
        let m = MetricsReport::compute(&l, &opt.coop()).unwrap();
        let f = fair_optimum(&l).unwrap();
        prop_assert!((m.accept[0][1] - m.accept[1][0]).abs() < 1e-12);
        prop_assert!((m.accept[0][1] - f.accept).abs() < 1e-12);
        prop_assert!((m.blocking[0] - f.b1).abs() < 1e-12);
        prop_assert!((m.blocking[1] - f.b2).abs() < 1e-12);
        prop_assert!(m.convenient.iter().all(|&c| c));
    }

    #[test]
    fn optimum_is_not_dominated(l in sorted_pair()) {
        let opt = optimal_pair(&l).unwrap();
        let star = chain_blocking(&l, opt.p1, opt.p2).unwrap();
        for a in 0..=20 {
            for b in 0..=20 {
                let c = chain_blocking(&l, a as f64 / 20.0, b as f64 / 20.0).unwrap();
                prop_assert!(!(c[0] < star[0] - 1e-12 && c[1] < star[1] - 1e-12));
            }
        }
    }

    #[test]
    fn gradients_have_expected_signs(l in pair(), a in 1usize..20, b in 1usize..20) {
        let g = gradient_check(&l, a as f64 / 20.0, b as f64 / 20.0, DEFAULT_FD_STEP).unwrap();
        prop_assert!(g.has_expected_signs(), "{:?}", g);
    }

    #[test]
    fn swapping_loads_swaps_blocking(l in pair(), p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0) {
        let s = &l.as_slice();
        let swapped = LoadVector::new(vec![s[1], s[0]]).unwrap();
        let a = chain_blocking(&l, p1, p2).unwrap();
        let b = chain_blocking(&swapped, p2, p1).unwrap();
        prop_assert!((a[0] - b[1]).abs() < 1e-12 && (a[1] - b[0]).abs() < 1e-12);
    }
}

#[test]
fn efficient_grid_points_lie_on_the_upper_edges() {
    let l = LoadVector::new(vec![0.9, 0.6]).unwrap();
    let grid: Vec<(f64, f64)> = (0..=20)
        .flat_map(|a| (0..=20).map(move |b| (a as f64 / 20.0, b as f64 / 20.0)))
        .collect();
    let points: Vec<[f64; 2]> = grid
        .iter()
        .map(|&(p1, p2)| chain_blocking(&l, p1, p2).unwrap())
        .collect();
    let keep = undominated(&points);
    assert!(!keep.is_empty());
    for k in keep {
        let (p1, p2) = grid[k];
        assert!(p1 == 1.0 || p2 == 1.0, "({p1}, {p2}) kept");
    }
    for a in 0..20 {
        for b in 0..20 {
            let (p1, p2) = (a as f64 / 20.0, b as f64 / 20.0);
            assert!(diagonal_step_improves(&l, p1, p2, 0.05).unwrap());
        }
    }
}
