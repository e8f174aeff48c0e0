//! Fair cooperation vectors for N nodes.
//!
//! Fairness asks every node to do as much work for the others as the others
//! do for it (`R_in = R_out`, or `r = 1`). Two independent routes reach the
//! fair vector with the most loaded node pinned at `p = 1`:
//!
//! * [`fixed_point`] alternates a chain solve with the linear fairness system
//!   `F' p = e_1`;
//! * [`centralized_bisect`] repeatedly picks the node with the largest ratio
//!   above `1 + ε` and bisects its own probability until its ratio is ~1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::{self, CoopVector, LoadVector, SteadyState};
use crate::error::{CoopError, Result};
use crate::exec::Exec;
use crate::metrics::{self, MetricsReport, Ratio};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 100;

/// Linear form of the fairness constraints at a fixed steady state.
///
/// `f_ij = λ_i P(s_i = 1, s_j = 0)` off the diagonal and
/// `f_ii = -Σ_{j≠i} f_ji`, so that `(F p)_i = (N-1)(R_out_i - R_in_i)` and every
/// column sums to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessMatrix {
    f: DMatrix<f64>,
}

impl FairnessMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.f[(i, j)]
    }

    pub fn apply(&self, p: &CoopVector) -> Vec<f64> {
        (&self.f * DVector::from_column_slice(p.as_slice()))
            .iter()
            .copied()
            .collect()
    }

    /// Singular values in non-increasing order.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.f.clone().singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }
}

pub fn fairness_matrix(pi: &SteadyState, loads: &LoadVector) -> Result<FairnessMatrix> {
    let n = loads.len();
    if pi.n_nodes() != n {
        return Err(CoopError::DimensionMismatch {
            expected: pi.n_nodes(),
            got: n,
        });
    }
    let mut f = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                f[(i, j)] = loads[i] * pi.busy_idle_prob(i, j);
            }
        }
    }
    for i in 0..n {
        let col: f64 = (0..n).filter(|&j| j != i).map(|j| f[(j, i)]).sum();
        f[(i, i)] = -col;
    }
    Ok(FairnessMatrix { f })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub p_star: CoopVector,
    pub iterations: usize,
    /// Final step size for the fixed point, `g(p)` for the bisection search.
    pub residual: f64,
    pub converged: bool,
    pub feasible: bool,
    /// Set when an iterate left the unit cube and was rescaled by its maximum.
    pub normalized: bool,
}

/// Fixed point on the loads as given, pinning node 0 at `pin`.
///
/// Starting from `p = 1`, each iteration solves the chain, builds `F`,
/// replaces its first row by `e_1` and solves `F' p = pin · e_1`. An iterate
/// with a component above one is divided by its maximum. Node 0 should be
/// the most loaded node; otherwise the raw iterates overshoot and
/// normalization kicks in.
pub fn fixed_point_pinned(
    loads: &LoadVector,
    pin: f64,
    opts: FixedPointOptions,
) -> Result<SolveReport> {
    if !(pin > 0.0 && pin <= 1.0) {
        return Err(CoopError::InvalidParameter {
            name: "pin",
            reason: format!("pinned probability must lie in (0, 1], got {pin}"),
        });
    }
    if opts.tol.is_nan() || opts.tol <= 0.0 || opts.max_iters == 0 {
        return Err(CoopError::InvalidParameter {
            name: "tol/max_iters",
            reason: "tolerance must be positive and at least one iteration allowed".into(),
        });
    }
    let n = loads.len();
    let mut p = CoopVector::ones(n);
    let mut normalized = false;
    let mut delta = f64::INFINITY;
    for it in 1..=opts.max_iters {
        let pi = chain::solve(loads, &p)?;
        let mut fp = fairness_matrix(&pi, loads)?.f;
        fp.row_mut(0).fill(0.0);
        fp[(0, 0)] = 1.0;
        let mut rhs = DVector::<f64>::zeros(n);
        rhs[0] = pin;
        let lu = fp.lu();
        let x = lu.solve(&rhs).ok_or(CoopError::Singular {
            condition: f64::INFINITY,
        })?;
        let mut next: Vec<f64> = x.iter().copied().collect();

        if next.iter().any(|v| !v.is_finite() || *v < -chain::NEGATIVE_CLIP) {
            return Ok(SolveReport {
                p_star: p,
                iterations: it,
                residual: delta,
                converged: false,
                feasible: false,
                normalized,
            });
        }
        for v in next.iter_mut() {
            *v = v.max(0.0);
        }
        let max = next.iter().copied().fold(0.0, f64::max);
        if max > 1.0 {
            normalized = true;
            for v in next.iter_mut() {
                *v /= max;
            }
        }
        let next = CoopVector::new(next)?;
        delta = next
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        p = next;
        if delta < opts.tol {
            return Ok(SolveReport {
                p_star: p,
                iterations: it,
                residual: delta,
                converged: true,
                feasible: true,
                normalized,
            });
        }
    }
    Ok(SolveReport {
        p_star: p,
        iterations: opts.max_iters,
        residual: delta,
        converged: false,
        feasible: true,
        normalized,
    })
}

/// Fair cooperation vector with the most loaded node pinned at 1.
///
/// Loads are sorted internally; the result is in the caller's node order.
pub fn fixed_point(loads: &LoadVector, opts: FixedPointOptions) -> Result<SolveReport> {
    let (sorted, order) = loads.sorted_desc();
    let mut report = fixed_point_pinned(&sorted, 1.0, opts)?;
    report.p_star = report.p_star.unpermuted(&order)?;
    Ok(report)
}

/// `g(p) = Σ_{j ≠ pinned} |1 - r_j(p)|`, where the pinned node is the most
/// loaded one. `g` is infinite outside its domain (a free component at zero)
/// or when a ratio is undefined.
pub fn g_residual(loads: &LoadVector, p: &CoopVector) -> Result<f64> {
    let pinned = loads.argmax();
    if p.as_slice().iter().enumerate().any(|(j, &v)| j != pinned && v == 0.0) {
        return Ok(f64::INFINITY);
    }
    let ratios = metrics::model_ratios(loads, p)?;
    Ok(ratio_residual(&ratios, pinned))
}

fn ratio_residual(ratios: &[Ratio], pinned: usize) -> f64 {
    ratios
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != pinned)
        .map(|(_, r)| r.value().map_or(f64::INFINITY, |v| (1.0 - v).abs()))
        .sum()
}

/// One row of the bisection search: ratios at `p`, and the node chosen next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectRound {
    pub ratios: Vec<Ratio>,
    pub selected: Option<usize>,
    pub p: CoopVector,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BisectTrace {
    pub rounds: Vec<BisectRound>,
}

/// Node with the largest defined ratio at or above `1 + eps`; ties go to
/// the lowest index.
pub fn select_node(ratios: &[Ratio], eps: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in ratios.iter().enumerate() {
        if let Some(v) = r.value() {
            if v >= 1.0 + eps && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Bisection on `p_j` over `[0, p_j]` with everything else fixed.
///
/// `r_j` grows with `p_j` (it vanishes at `p_j = 0`), so a ratio above one
/// moves the upper end down. Stops when `|r_j - 1| ≤ eps` or the bracket is
/// narrower than `eps / 10`.
pub fn bisect_node(loads: &LoadVector, p: &CoopVector, j: usize, eps: f64) -> Result<CoopVector> {
    let mut lo = 0.0;
    let mut hi = p[j];
    loop {
        let mid = 0.5 * (lo + hi);
        let candidate = p.with(j, mid)?;
        let r = metrics::model_ratios(loads, &candidate)?[j]
            .value()
            .unwrap_or(f64::INFINITY);
        if (r - 1.0).abs() <= eps {
            return Ok(candidate);
        }
        if r > 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < eps / 10.0 {
            return Ok(candidate);
        }
    }
}

/// Ratio-driven search for the fair vector, starting from full cooperation.
///
/// `max_steps` bounds the number of per-node bisections. Running out of
/// steps while a node is still selectable yields `feasible = false` together
/// with the partial trace.
pub fn centralized_bisect(
    loads: &LoadVector,
    eps: f64,
    max_steps: usize,
) -> Result<(SolveReport, BisectTrace)> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(CoopError::InvalidParameter {
            name: "eps",
            reason: format!("must lie in (0, 1), got {eps}"),
        });
    }
    let n = loads.len();
    let mut p = CoopVector::ones(n);
    let mut trace = BisectTrace::default();
    let mut ratios = metrics::model_ratios(loads, &p)?;
    let mut selected = select_node(&ratios, eps);
    let mut steps = 0;
    while let Some(j) = selected {
        if steps == max_steps {
            break;
        }
        trace.rounds.push(BisectRound {
            ratios: ratios.clone(),
            selected: Some(j),
            p: p.clone(),
        });
        p = bisect_node(loads, &p, j, eps)?;
        ratios = metrics::model_ratios(loads, &p)?;
        selected = select_node(&ratios, eps);
        steps += 1;
    }
    trace.rounds.push(BisectRound {
        ratios: ratios.clone(),
        selected,
        p: p.clone(),
    });
    let converged = selected.is_none();
    Ok((
        SolveReport {
            residual: ratio_residual(&ratios, loads.argmax()),
            p_star: p,
            iterations: steps,
            converged,
            feasible: converged,
            normalized: false,
        },
        trace,
    ))
}

/// One cell of a two-node `(p1, p2)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoCell {
    pub p1: f64,
    pub p2: f64,
    pub b1: f64,
    pub b2: f64,
    pub convenient1: bool,
    pub convenient2: bool,
    /// `|a_12 - a_21|`
    pub fair_residual: f64,
}

/// Evaluates the two-node chain on a uniform `grid × grid` lattice over the
/// unit square, `p1` varying slowest.
pub fn pareto_scan(loads: &LoadVector, grid: usize, exec: Exec) -> Result<Vec<ParetoCell>> {
    if loads.len() != 2 {
        return Err(CoopError::NotTwoNodes(loads.len()));
    }
    if grid < 2 {
        return Err(CoopError::InvalidParameter {
            name: "grid",
            reason: format!("need at least 2 points per axis, got {grid}"),
        });
    }
    let step = 1.0 / (grid - 1) as f64;
    let points: Vec<(f64, f64)> = (0..grid)
        .flat_map(|a| (0..grid).map(move |b| (a as f64 * step, b as f64 * step)))
        .collect();
    exec.try_map(&points, |&(p1, p2)| {
        let coop = CoopVector::new(vec![p1, p2])?;
        let r = MetricsReport::compute(loads, &coop)?;
        Ok(ParetoCell {
            p1,
            p2,
            b1: r.blocking[0],
            b2: r.blocking[1],
            convenient1: r.convenient[0],
            convenient2: r.convenient[1],
            fair_residual: (r.accept[0][1] - r.accept[1][0]).abs(),
        })
    })
}

/// `Σ_i |b_i(p') - b_i(p*)|`, where `p'` is the fair vector with the most
/// loaded node pinned at `p1_fixed` and `p*` the one pinned at 1.
pub fn distance_from_optimum(
    loads: &LoadVector,
    p1_fixed: f64,
    opts: FixedPointOptions,
) -> Result<f64> {
    let (sorted, _) = loads.sorted_desc();
    let star = fixed_point_pinned(&sorted, 1.0, opts)?;
    let other = fixed_point_pinned(&sorted, p1_fixed, opts)?;
    for r in [&star, &other] {
        if !r.feasible {
            return Err(CoopError::Degenerate(
                "pinned fixed point left the feasible region".into(),
            ));
        }
    }
    let b_star = MetricsReport::compute(&sorted, &star.p_star)?.blocking;
    let b_other = MetricsReport::compute(&sorted, &other.p_star)?.blocking;
    Ok(b_star
        .iter()
        .zip(&b_other)
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Central finite difference of `r_j` with respect to `p_j`.
pub fn ratio_slope(loads: &LoadVector, p: &CoopVector, j: usize, h: f64) -> Result<f64> {
    let lo = (p[j] - h).max(0.0);
    let hi = (p[j] + h).min(1.0);
    let r = |v: f64| -> Result<f64> {
        Ok(metrics::model_ratios(loads, &p.with(j, v)?)?[j]
            .value()
            .unwrap_or(f64::NAN))
    };
    Ok((r(hi)? - r(lo)?) / (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f64]) -> LoadVector {
        LoadVector::new(v.to_vec()).unwrap()
    }

    const TABLE_LOADS: [f64; 4] = [0.9, 0.8, 0.7, 0.6];

    #[test]
    fn fairness_identity_against_metrics() {
        let l = lv(&[0.9, 0.5, 1.3]);
        let p = CoopVector::new(vec![0.8, 0.3, 1.0]).unwrap();
        let pi = chain::solve(&l, &p).unwrap();
        let f = fairness_matrix(&pi, &l).unwrap();
        let r = MetricsReport::from_steady_state(&pi, &l, &p).unwrap();
        for (i, v) in f.apply(&p).iter().enumerate() {
            let want = 2.0 * (r.r_out[i] - r.r_in[i]);
            assert!((v - want).abs() < 1e-12);
        }
        for j in 0..3 {
            let col: f64 = (0..3).map(|i| f.entry(i, j)).sum();
            assert!(col.abs() < 1e-15);
        }
    }

    #[test]
    fn fairness_matrix_is_singular() {
        let l = lv(&TABLE_LOADS);
        let p = CoopVector::new(vec![1.0, 0.7, 0.5, 0.4]).unwrap();
        let f = fairness_matrix(&chain::solve(&l, &p).unwrap(), &l).unwrap();
        let s = f.singular_values();
        assert!(s[s.len() - 1] < 1e-10 * s[0]);
    }

    #[test]
    fn symmetric_loads_are_fair_at_full_cooperation() {
        let l = lv(&[0.6, 0.6, 0.6]);
        let p = CoopVector::ones(3);
        let f = fairness_matrix(&chain::solve(&l, &p).unwrap(), &l).unwrap();
        assert!(f.apply(&p).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn fixed_point_two_nodes() {
        let r = fixed_point(&lv(&[0.9, 0.8]), FixedPointOptions::default()).unwrap();
        assert!(r.converged && r.feasible && !r.normalized);
        assert_eq!(r.p_star[0], 1.0);
        assert!((r.p_star[1] - (0.8f64 / 0.9).powi(2)).abs() < 1e-6);

        let r = fixed_point(&lv(&[0.5, 0.5]), FixedPointOptions::default()).unwrap();
        assert!((r.p_star[0] - 1.0).abs() < 1e-12 && (r.p_star[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_restores_caller_order() {
        let r = fixed_point(&lv(&[0.8, 0.9]), FixedPointOptions::default()).unwrap();
        assert_eq!(r.p_star[1], 1.0);
        assert!((r.p_star[0] - (0.8f64 / 0.9).powi(2)).abs() < 1e-6);
    }

    #[test]
    fn fixed_point_table_loads() {
        let l = lv(&TABLE_LOADS);
        let r = fixed_point(&l, FixedPointOptions::default()).unwrap();
        assert!(r.converged);
        let p = r.p_star.as_slice();
        assert_eq!(p[0], 1.0);
        assert!(p[1] > p[2] && p[2] > p[3] && p[3] > 0.0, "{p:?}");
        assert!(g_residual(&l, &r.p_star).unwrap() < 1e-6);
    }

    #[test]
    fn unsorted_pin_triggers_normalization() {
        // least loaded node pinned: raw iterates exceed one
        let r = fixed_point_pinned(&lv(&[0.6, 0.9, 0.8, 0.7]), 1.0, FixedPointOptions::default())
            .unwrap();
        assert!(r.normalized);
        assert!(r.p_star.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn g_residual_values() {
        let l = lv(&TABLE_LOADS);
        let g = g_residual(&l, &CoopVector::ones(4)).unwrap();
        assert!((g - 0.836).abs() < 3e-3, "{g}");

        let pair = crate::closed_form::optimal_pair(&lv(&[0.9, 0.8])).unwrap();
        assert!(g_residual(&lv(&[0.9, 0.8]), &pair.coop()).unwrap() < 1e-10);

        let p = CoopVector::new(vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(g_residual(&l, &p).unwrap(), f64::INFINITY);
    }

    #[test]
    fn selection_rule() {
        let r = |v: &[f64]| v.iter().map(|&x| Ratio::Value(x)).collect::<Vec<_>>();
        assert_eq!(select_node(&r(&[0.675, 0.875, 1.154, 1.557]), 0.01), Some(3));
        assert_eq!(select_node(&r(&[0.9, 1.2, 1.2]), 0.01), Some(1));
        assert_eq!(select_node(&r(&[1.0, 1.005]), 0.01), None);
        assert_eq!(select_node(&[Ratio::Undefined, Ratio::Value(0.5)], 0.01), None);
    }

    #[test]
    fn bisection_table_order() {
        let (rep, trace) = centralized_bisect(&lv(&TABLE_LOADS), 1e-2, 100).unwrap();
        assert!(rep.converged && rep.feasible);
        let order: Vec<_> = trace.rounds.iter().take(3).map(|r| r.selected).collect();
        assert_eq!(order, vec![Some(3), Some(2), Some(1)]);
        assert_eq!(trace.rounds.last().unwrap().selected, None);
        assert_eq!(rep.p_star[0], 1.0);
    }

    #[test]
    fn bisection_symmetric_loads_stop_immediately() {
        let (rep, trace) = centralized_bisect(&lv(&[0.7, 0.7, 0.7]), 1e-2, 10).unwrap();
        assert_eq!(trace.rounds.len(), 1);
        assert_eq!(trace.rounds[0].selected, None);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn bisection_budget_exhaustion() {
        let (rep, trace) = centralized_bisect(&lv(&TABLE_LOADS), 1e-2, 2).unwrap();
        assert!(!rep.feasible && !rep.converged);
        assert_eq!(trace.rounds.len(), 3);
        assert!(trace.rounds[2].selected.is_some());
        assert!(centralized_bisect(&lv(&TABLE_LOADS), 0.0, 2).is_err());
    }

    #[test]
    fn bisection_two_nodes() {
        let l = lv(&[0.9, 0.8]);
        let (rep, _) = centralized_bisect(&l, 1e-4, 50).unwrap();
        assert!((rep.p_star[1] - (0.8f64 / 0.9).powi(2)).abs() < 1e-3);
    }

    #[test]
    fn pareto_grid_shape() {
        let cells = pareto_scan(&lv(&[0.9, 0.8]), 11, Exec::Sequential).unwrap();
        assert_eq!(cells.len(), 121);
        let c0 = cells[0];
        assert_eq!((c0.p1, c0.p2), (0.0, 0.0));
        assert!(!c0.convenient1 && !c0.convenient2);
        assert!((c0.b1 - 0.9 / 1.9).abs() < 1e-12);
        let last = cells[120];
        assert_eq!((last.p1, last.p2), (1.0, 1.0));
        assert!(pareto_scan(&lv(&[0.9, 0.8]), 1, Exec::Sequential).is_err());
        assert!(pareto_scan(&lv(&[0.9, 0.8, 0.7]), 5, Exec::Sequential).is_err());
    }

    #[test]
    fn distance_vanishes_at_full_pin() {
        let l = lv(&TABLE_LOADS);
        let d = distance_from_optimum(&l, 1.0, FixedPointOptions::default()).unwrap();
        assert!(d < 1e-12);
        let d = distance_from_optimum(&l, 0.8, FixedPointOptions::default()).unwrap();
        assert!(d > 0.0);
        assert!(distance_from_optimum(&l, 0.0, FixedPointOptions::default()).is_err());
    }
}
