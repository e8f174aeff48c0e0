//! Two-node model in closed form.
//!
//! For two nodes the blocking probability of node 1 is a ratio of two
//! bilinear polynomials in `(p1, p2)`:
//!
//! ```text
//! b1(p1, p2) = (κ1 + α1 p1 + β1 p2 - γ1 p1 p2) / (κ + α p1 + β p2 + γ p1 p2)
//! ```
//!
//! The denominator is `-det A`, where `A` is the balance system of the chain,
//! and is bilinear because `p1` and `p2` each enter a single column of `A`.
//! The coefficients are therefore recovered exactly from the four corners of
//! the unit square, evaluated on the chain itself.

use serde::{Deserialize, Serialize};

use crate::chain::{self, CoopVector, LoadVector};
use crate::error::{CoopError, Result};
use crate::metrics;

/// Largest finite-difference step accepted by [`gradient_check`].
pub const MAX_FD_STEP: f64 = 1e-2;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RationalCoeffs {
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub kappa1: f64,
    pub alpha1: f64,
    pub beta1: f64,
    pub gamma1: f64,
}

impl RationalCoeffs {
    pub fn numerator(&self, p1: f64, p2: f64) -> f64 {
        self.kappa1 + self.alpha1 * p1 + self.beta1 * p2 - self.gamma1 * p1 * p2
    }

    pub fn denominator(&self, p1: f64, p2: f64) -> f64 {
        self.kappa + self.alpha * p1 + self.beta * p2 + self.gamma * p1 * p2
    }
}

/// The coefficients as usually written out by hand:
///
/// ```text
/// κ  = 2 + 3λ1 + 3λ2 + 4λ1λ2 + λ1² + λ2² + λ1²λ2 + λ1λ2²
/// α  = λ2 + λ1λ2 + 2λ2² + λ2³ + λ1λ2²
/// β  = λ1 + λ1λ2 + 2λ1² + λ1³ + λ1²λ2
/// γ  = λ1²λ2 + λ1λ2²
/// κ1 = 2λ1 + 3λ1λ2 + λ1² + λ1²λ2 + λ1λ2²
/// α1 = 2λ2² + λ1λ2 + λ1λ2³ + λ2³
/// β1 = λ2 + λ1²λ2 + λ1³ - 2λ1 - λ1λ2
/// γ1 = λ1λ2 + λ2² - λ1²λ2 - λ1λ2²
/// ```
///
/// The denominator terms and `κ1`, `γ1` agree with the chain. `α1` and `β1`
/// do not: the chain gives `α1 = 2λ2² + λ1λ2 + λ1λ2² + λ2³` and
/// `β1 = λ1³ + λ1²λ2 - 2λ1 - λ1λ2`. Kept for cross-checking only.
pub fn handwritten_coeffs(l1: f64, l2: f64) -> RationalCoeffs {
    RationalCoeffs {
        kappa: 2.0 + 3.0 * l1 + 3.0 * l2 + 4.0 * l1 * l2 + l1 * l1 + l2 * l2
            + l1 * l1 * l2
            + l2 * l2 * l1,
        alpha: l2 + l1 * l2 + 2.0 * l2 * l2 + l2.powi(3) + l2 * l2 * l1,
        beta: l1 + l2 * l1 + 2.0 * l1 * l1 + l1.powi(3) + l1 * l1 * l2,
        gamma: l1 * l1 * l2 + l2 * l2 * l1,
        kappa1: 2.0 * l1 + 3.0 * l1 * l2 + l1 * l1 + l1 * l1 * l2 + l2 * l2 * l1,
        alpha1: 2.0 * l2 * l2 + l1 * l2 + l1 * l2.powi(3) + l2.powi(3),
        beta1: l2 + l1 * l1 * l2 + l1.powi(3) - 2.0 * l1 - l1 * l2,
        gamma1: l1 * l2 + l2 * l2 - l1 * l1 * l2 - l2 * l2 * l1,
    }
}

fn require_two(loads: &LoadVector) -> Result<(f64, f64)> {
    if loads.len() == 2 {
        Ok((loads[0], loads[1]))
    } else {
        Err(CoopError::NotTwoNodes(loads.len()))
    }
}

/// Chain-based two-node blocking probabilities at `(p1, p2)`.
pub fn chain_blocking(loads: &LoadVector, p1: f64, p2: f64) -> Result<[f64; 2]> {
    require_two(loads)?;
    let coop = CoopVector::new(vec![p1, p2])?;
    let g = chain::build_generator_n2(loads, &coop)?;
    let pi = chain::steady_state(&g)?;
    metrics::blocking_n2(&pi, &coop)
}

/// Coefficients of `b1` for the given loads, derived from the chain.
pub fn derive_coeffs(loads: &LoadVector) -> Result<RationalCoeffs> {
    let (l1, l2) = require_two(loads)?;
    let mut den = [[0.0; 2]; 2];
    let mut num = [[0.0; 2]; 2];
    for (a, p1) in [0.0, 1.0].into_iter().enumerate() {
        for (b, p2) in [0.0, 1.0].into_iter().enumerate() {
            let coop = CoopVector::new(vec![p1, p2])?;
            let g = chain::build_generator_n2(loads, &coop)?;
            let d = -chain::balance_matrix(&g).determinant();
            if !(d.is_finite() && d > 0.0) {
                return Err(CoopError::Degenerate(format!(
                    "balance determinant {d:e} at corner ({p1}, {p2})"
                )));
            }
            let pi = chain::steady_state(&g)?;
            den[a][b] = d;
            num[a][b] = metrics::blocking_n2(&pi, &coop)?[0] * d;
        }
    }
    let c = RationalCoeffs {
        kappa: den[0][0],
        alpha: den[1][0] - den[0][0],
        beta: den[0][1] - den[0][0],
        gamma: den[1][1] - den[1][0] - den[0][1] + den[0][0],
        kappa1: num[0][0],
        alpha1: num[1][0] - num[0][0],
        beta1: num[0][1] - num[0][0],
        gamma1: -(num[1][1] - num[1][0] - num[0][1] + num[0][0]),
    };
    let expected = handwritten_coeffs(l1, l2).kappa;
    if (c.kappa - expected).abs() > 1e-9 * expected {
        return Err(CoopError::Degenerate(format!(
            "constant denominator term {} does not match its polynomial value {expected}",
            c.kappa
        )));
    }
    Ok(c)
}

/// Evaluates the rational form of `b1`.
pub fn b1_closed(coeffs: &RationalCoeffs, p1: f64, p2: f64) -> f64 {
    coeffs.numerator(p1, p2) / coeffs.denominator(p1, p2)
}

/// Both blocking probabilities in closed form. `b2` reuses the `b1` form
/// with the node labels exchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub b1: RationalCoeffs,
    pub b2: RationalCoeffs,
}

impl ClosedForm {
    pub fn new(loads: &LoadVector) -> Result<Self> {
        let (l1, l2) = require_two(loads)?;
        let swapped = LoadVector::new(vec![l2, l1])?;
        Ok(Self {
            b1: derive_coeffs(loads)?,
            b2: derive_coeffs(&swapped)?,
        })
    }

    pub fn blocking(&self, p1: f64, p2: f64) -> [f64; 2] {
        [b1_closed(&self.b1, p1, p2), b1_closed(&self.b2, p2, p1)]
    }
}

/// The fair, efficient and convenient two-node cooperation pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalPair {
    /// Always 1: the more loaded node cooperates fully.
    pub p1: f64,
    /// `(λ_low / λ_high)²` for the less loaded node.
    pub p2: f64,
    /// True when the caller's first node was the less loaded one.
    pub swap_applied: bool,
}

impl OptimalPair {
    /// The pair in the caller's node order.
    pub fn coop(&self) -> CoopVector {
        let v = if self.swap_applied {
            vec![self.p2, self.p1]
        } else {
            vec![self.p1, self.p2]
        };
        CoopVector::new(v).expect("pair components lie in (0, 1]")
    }
}

pub fn optimal_pair(loads: &LoadVector) -> Result<OptimalPair> {
    let (l1, l2) = require_two(loads)?;
    let swap_applied = l2 > l1;
    let (hi, lo) = if swap_applied { (l2, l1) } else { (l1, l2) };
    Ok(OptimalPair {
        p1: 1.0,
        p2: (lo / hi).powi(2),
        swap_applied,
    })
}

/// Steady state and performance at the optimal pair, in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairOptimum {
    pub det_a: f64,
    pub pi10: f64,
    pub pi01: f64,
    pub pi11: f64,
    pub b1: f64,
    pub b2: f64,
    /// Common value of the two acceptance rates.
    pub accept: f64,
}

/// Requires `λ1 ≥ λ2`.
pub fn fair_optimum(loads: &LoadVector) -> Result<FairOptimum> {
    let (l1, l2) = require_two(loads)?;
    if l2 > l1 {
        return Err(CoopError::UnsortedLoads);
    }
    let det_a = 1.0 + l1 + l2 + l1 * l2 + l2 * l2;
    Ok(FairOptimum {
        det_a,
        pi10: l1 / det_a,
        pi01: l2 / det_a,
        pi11: (l1 * l2 + l2 * l2) / det_a,
        b1: (l1 * l2 + l2 * l2 + l1 - l2 * l2 / l1) / det_a,
        b2: (l1 * l2 + l2 * l2) / det_a,
        accept: l2 * l2 / det_a,
    })
}

/// Slope `c` of the fair locus `p2 = c · p1`, `c = (π01/π10)(λ2/λ1)`, at the
/// given steady state. Because `π` itself moves with `p`, this is a
/// self-consistency map rather than an explicit curve.
pub fn fair_pair_locus(pi: &chain::SteadyState, loads: &LoadVector) -> Result<f64> {
    let (l1, l2) = require_two(loads)?;
    if pi.n_nodes() != 2 {
        return Err(CoopError::NotTwoNodes(pi.n_nodes()));
    }
    let p = pi.as_slice();
    let (pi10, pi01) = (p[1], p[2]);
    if pi10 <= 0.0 {
        return Err(CoopError::Degenerate("π10 is zero".into()));
    }
    Ok(pi01 / pi10 * l2 / l1)
}

/// Finite-difference partial derivatives of the chain-based blocking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub db1dp1: f64,
    pub db1dp2: f64,
    pub db2dp1: f64,
    pub db2dp2: f64,
    /// `∇b1 · ∇b2`
    pub dot: f64,
}

impl GradientReport {
    /// Sign pattern of an interior point: each node's blocking rises with
    /// its own cooperation, falls with the other's, and the gradients point
    /// more than a right angle apart.
    pub fn has_expected_signs(&self) -> bool {
        self.db1dp1 > 0.0
            && self.db1dp2 < 0.0
            && self.db2dp1 < 0.0
            && self.db2dp2 > 0.0
            && self.dot < 0.0
    }
}

/// Central differences with step `h`; one-sided where `p ± h` would leave
/// the unit square.
pub fn gradient_check(loads: &LoadVector, p1: f64, p2: f64, h: f64) -> Result<GradientReport> {
    require_two(loads)?;
    if !(h > 0.0 && h <= MAX_FD_STEP) {
        return Err(CoopError::InvalidParameter {
            name: "h",
            reason: format!("step must lie in (0, {MAX_FD_STEP}], got {h}"),
        });
    }
    let partial = |axis: usize| -> Result<[f64; 2]> {
        let x = if axis == 0 { p1 } else { p2 };
        let lo = if x - h >= 0.0 { x - h } else { x };
        let hi = if x + h <= 1.0 { x + h } else { x };
        let at = |v: f64| {
            if axis == 0 {
                chain_blocking(loads, v, p2)
            } else {
                chain_blocking(loads, p1, v)
            }
        };
        let (bl, bh) = (at(lo)?, at(hi)?);
        let w = hi - lo;
        Ok([(bh[0] - bl[0]) / w, (bh[1] - bl[1]) / w])
    };
    let d1 = partial(0)?;
    let d2 = partial(1)?;
    Ok(GradientReport {
        db1dp1: d1[0],
        db1dp2: d2[0],
        db2dp1: d1[1],
        db2dp2: d2[1],
        dot: d1[0] * d1[1] + d2[0] * d2[1],
    })
}

/// A unit direction with positive components along which both blocking
/// probabilities fall to first order, or `None` if the gradients admit none.
///
/// The slope `d2/d1` must exceed `(∂b1/∂p1)/(-∂b1/∂p2)` and stay below
/// `(-∂b2/∂p1)/(∂b2/∂p2)`; the geometric mean of the two bounds is returned.
/// The diagonal `(1, 1)` is often outside this cone when the loads differ.
pub fn pareto_direction(g: &GradientReport) -> Option<[f64; 2]> {
    if !g.has_expected_signs() {
        return None;
    }
    let lo = g.db1dp1 / -g.db1dp2;
    let hi = -g.db2dp1 / g.db2dp2;
    if lo >= hi {
        return None;
    }
    let slope = (lo * hi).sqrt();
    let norm = (1.0 + slope * slope).sqrt();
    Some([1.0 / norm, slope / norm])
}

/// True when moving by `t·(1, 1)` strictly lowers both blocking probabilities.
pub fn diagonal_step_improves(loads: &LoadVector, p1: f64, p2: f64, t: f64) -> Result<bool> {
    let b = chain_blocking(loads, p1, p2)?;
    let c = chain_blocking(loads, p1 + t, p2 + t)?;
    Ok(c[0] < b[0] && c[1] < b[1])
}

/// Indices of grid points not weakly dominated by any other grid point.
/// `points[k] = [b1, b2]`.
pub fn undominated(points: &[[f64; 2]]) -> Vec<usize> {
    (0..points.len())
        .filter(|&k| {
            let [a1, a2] = points[k];
            !points.iter().enumerate().any(|(m, &[c1, c2])| {
                m != k && c1 <= a1 && c2 <= a2 && (c1 < a1 || c2 < a2)
            })
        })
        .collect()
}
