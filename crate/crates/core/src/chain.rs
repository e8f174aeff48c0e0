//! Continuous-time Markov chain of N cooperating single-server nodes.
//!
//! A state is the busy/idle pattern of all servers, encoded as a bit mask with
//! node `i` (zero-based) on bit `i`. The state index is the integer value of
//! the mask, so for two nodes the order is `00, 10, 01, 11` when written as
//! `(s_1 s_2)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoopError, Result};

/// Hard limit on the number of nodes accepted by [`LoadVector`].
pub const MAX_NODES: usize = 20;

/// Tolerance under which negative steady-state entries are clipped to zero.
pub const NEGATIVE_CLIP: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-10;
const RESIDUAL_TOL: f64 = 1e-9;

/// Poisson arrival rate of every node, in tasks per mean service time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LoadVector(Vec<f64>);

impl LoadVector {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.len() < 2 {
            return Err(CoopError::TooFewNodes(lambdas.len()));
        }
        if lambdas.len() > MAX_NODES {
            return Err(CoopError::TooManyNodes {
                got: lambdas.len(),
                max: MAX_NODES,
            });
        }
        for (node, &value) in lambdas.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(CoopError::InvalidLoad { node, value });
            }
        }
        Ok(Self(lambdas))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Index of the largest load; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.0.iter().enumerate() {
            if l > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_sorted_desc(&self) -> bool {
        self.0.windows(2).all(|w| w[0] >= w[1])
    }

    /// Returns the loads sorted in non-increasing order together with the
    /// permutation `order` such that `sorted[k] = self[order[k]]`. The sort is
    /// stable, so equal loads keep their relative order.
    pub fn sorted_desc(&self) -> (LoadVector, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]));
        let sorted = order.iter().map(|&i| self.0[i]).collect();
        (LoadVector(sorted), order)
    }

    /// Loads with the node order changed so that `result[k] = self[order[k]]`.
    pub fn permuted(&self, order: &[usize]) -> Result<LoadVector> {
        check_len(self.len(), order.len())?;
        LoadVector::new(order.iter().map(|&i| self.0[i]).collect())
    }
}

impl std::ops::Index<usize> for LoadVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for LoadVector {
    type Error = CoopError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        LoadVector::new(v)
    }
}

impl From<LoadVector> for Vec<f64> {
    fn from(v: LoadVector) -> Self {
        v.0
    }
}

/// Per-node probability of accepting a probed remote task while idle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CoopVector(Vec<f64>);

impl CoopVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        for (node, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(CoopError::InvalidProbability { node, value });
            }
        }
        Ok(Self(probs))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Copy with component `i` replaced.
    pub fn with(&self, i: usize, value: f64) -> Result<CoopVector> {
        let mut v = self.0.clone();
        v[i] = value;
        CoopVector::new(v)
    }

    pub fn permuted(&self, order: &[usize]) -> Result<CoopVector> {
        check_len(self.len(), order.len())?;
        CoopVector::new(order.iter().map(|&i| self.0[i]).collect())
    }

    /// Inverse of [`CoopVector::permuted`]: `result[order[k]] = self[k]`.
    pub fn unpermuted(&self, order: &[usize]) -> Result<CoopVector> {
        check_len(self.len(), order.len())?;
        let mut v = vec![0.0; self.len()];
        for (k, &i) in order.iter().enumerate() {
            v[i] = self.0[k];
        }
        CoopVector::new(v)
    }
}

impl std::ops::Index<usize> for CoopVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for CoopVector {
    type Error = CoopError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        CoopVector::new(v)
    }
}

impl From<CoopVector> for Vec<f64> {
    fn from(v: CoopVector) -> Self {
        v.0
    }
}

/// Busy/idle pattern of the servers; bit `i` set means node `i` is busy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateMask(u32);

impl StateMask {
    pub fn new(bits: u32, n_nodes: usize) -> Option<Self> {
        (n_nodes <= MAX_NODES && bits >> n_nodes == 0).then_some(Self(bits))
    }

    pub fn from_index(index: usize) -> Self {
        Self(index as u32)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_busy(self, node: usize) -> bool {
        self.0 >> node & 1 == 1
    }

    pub fn set_busy(self, node: usize) -> Self {
        Self(self.0 | 1 << node)
    }

    pub fn set_idle(self, node: usize) -> Self {
        Self(self.0 & !(1 << node))
    }

    pub fn busy_count(self) -> u32 {
        self.0.count_ones()
    }

    /// All masks of an `n`-node system in index order.
    pub fn all(n_nodes: usize) -> impl Iterator<Item = StateMask> {
        (0..1u32 << n_nodes).map(StateMask)
    }
}

/// Infinitesimal generator `Q` over the `2^N` state masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    n_nodes: usize,
    q: DMatrix<f64>,
}

impl Generator {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_states(&self) -> usize {
        self.q.nrows()
    }

    pub fn rate(&self, from: StateMask, to: StateMask) -> f64 {
        self.q[(from.index(), to.index())]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn row(&self, s: StateMask) -> Vec<f64> {
        self.q.row(s.index()).iter().copied().collect()
    }

    /// Largest absolute row sum; zero for a well-formed generator.
    pub fn max_row_sum(&self) -> f64 {
        self.q
            .row_iter()
            .map(|r| r.sum().abs())
            .fold(0.0, f64::max)
    }
}

/// Stationary distribution of the chain, indexed by state mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    n_nodes: usize,
    pi: Vec<f64>,
}

impl SteadyState {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn prob(&self, s: StateMask) -> f64 {
        self.pi[s.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateMask, f64)> + '_ {
        self.pi
            .iter()
            .enumerate()
            .map(|(i, &p)| (StateMask::from_index(i), p))
    }

    /// Probability that node `i` is busy.
    pub fn busy_prob(&self, i: usize) -> f64 {
        self.iter().filter(|(s, _)| s.is_busy(i)).map(|(_, p)| p).sum()
    }

    /// Probability that node `i` is busy while node `j` is idle.
    pub fn busy_idle_prob(&self, i: usize, j: usize) -> f64 {
        self.iter()
            .filter(|(s, _)| s.is_busy(i) && !s.is_busy(j))
            .map(|(_, p)| p)
            .sum()
    }

    /// Distribution of the number of busy servers, indexed `0..=N`.
    pub fn busy_count_distribution(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_nodes + 1];
        for (s, p) in self.iter() {
            d[s.busy_count() as usize] += p;
        }
        d
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(CoopError::DimensionMismatch { expected, got })
    }
}

/// Literal 4x4 generator of the two-node chain, state order `00, 10, 01, 11`.
pub fn build_generator_n2(loads: &LoadVector, coop: &CoopVector) -> Result<Generator> {
    if loads.len() != 2 {
        return Err(CoopError::NotTwoNodes(loads.len()));
    }
    check_len(2, coop.len())?;
    let (l1, l2) = (loads[0], loads[1]);
    let (p1, p2) = (coop[0], coop[1]);
    #[rustfmt::skip]
    let q = DMatrix::from_row_slice(4, 4, &[
        -l1 - l2, l1,                   l2,                   0.0,
        1.0,      -1.0 - p2 * l1 - l2,  0.0,                  l2 + p2 * l1,
        1.0,      0.0,                  -1.0 - p1 * l2 - l1,  l1 + p1 * l2,
        0.0,      1.0,                  1.0,                  -2.0,
    ]);
    Ok(Generator { n_nodes: 2, q })
}

/// Generator of the N-node chain.
///
/// An idle node `i` turns busy at rate `λ_i + p_i/(N-1) · Σ_{j busy} λ_j`:
/// its own arrivals plus overflow from each busy node that happens to probe
/// it and is accepted. A busy node turns idle at the unit service rate.
pub fn build_generator(loads: &LoadVector, coop: &CoopVector) -> Result<Generator> {
    let n = loads.len();
    check_len(n, coop.len())?;
    let n_states = 1usize << n;
    let fanout = (n - 1) as f64;
    let lambda = loads.as_slice();
    let p = coop.as_slice();

    let mut q = DMatrix::<f64>::zeros(n_states, n_states);
    for s in StateMask::all(n) {
        let busy_load: f64 = (0..n).filter(|&j| s.is_busy(j)).map(|j| lambda[j]).sum();
        let mut out = 0.0;
        for i in 0..n {
            let (target, rate) = if s.is_busy(i) {
                (s.set_idle(i), 1.0)
            } else {
                (s.set_busy(i), lambda[i] + p[i] / fanout * busy_load)
            };
            q[(s.index(), target.index())] = rate;
            out += rate;
        }
        q[(s.index(), s.index())] = -out;
    }
    Ok(Generator { n_nodes: n, q })
}

/// The balance system matrix: `Qᵀ` with its last row replaced by ones.
pub fn balance_matrix(g: &Generator) -> DMatrix<f64> {
    let mut a = g.q.transpose();
    let last = a.nrows() - 1;
    a.row_mut(last).fill(1.0);
    a
}

/// Solves `A π = e_last` by dense LU with partial pivoting, then checks
/// non-negativity, normalization and the global balance residual.
pub fn steady_state(g: &Generator) -> Result<SteadyState> {
    let a = balance_matrix(g);
    let n_states = a.nrows();
    let mut rhs = DVector::<f64>::zeros(n_states);
    rhs[n_states - 1] = 1.0;

    let lu = a.lu();
    let u = lu.u();
    let diag = u.diagonal().map(f64::abs);
    let (dmin, dmax) = (diag.min(), diag.max());
    let condition = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
    if !condition.is_finite() || condition > 1e14 {
        return Err(CoopError::Singular { condition });
    }
    let x = lu
        .solve(&rhs)
        .ok_or(CoopError::Singular { condition })?;

    let mut pi: Vec<f64> = x.iter().copied().collect();
    for v in pi.iter_mut() {
        if *v < 0.0 {
            if *v < -NEGATIVE_CLIP {
                return Err(CoopError::SteadyStateViolation {
                    what: "negative probability",
                    value: *v,
                });
            }
            *v = 0.0;
        }
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(CoopError::SteadyStateViolation {
            what: "normalization error",
            value: total - 1.0,
        });
    }
    let residual = balance_residual(g, &pi);
    if residual > RESIDUAL_TOL {
        return Err(CoopError::SteadyStateViolation {
            what: "balance residual",
            value: residual,
        });
    }
    Ok(SteadyState {
        n_nodes: g.n_nodes,
        pi,
    })
}

/// `‖πᵀQ‖∞`.
pub fn balance_residual(g: &Generator, pi: &[f64]) -> f64 {
    let v = DVector::from_column_slice(pi);
    (g.q.transpose() * v).amax()
}

/// Convenience: build the generator and solve it.
pub fn solve(loads: &LoadVector, coop: &CoopVector) -> Result<SteadyState> {
    steady_state(&build_generator(loads, coop)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f64]) -> LoadVector {
        LoadVector::new(v.to_vec()).unwrap()
    }

    fn cv(v: &[f64]) -> CoopVector {
        CoopVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn load_vector_validation() {
        assert_eq!(LoadVector::new(vec![0.9]), Err(CoopError::TooFewNodes(1)));
        assert!(matches!(
            LoadVector::new(vec![1.0, 0.0]),
            Err(CoopError::InvalidLoad { node: 1, .. })
        ));
        assert!(LoadVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(matches!(
            LoadVector::new(vec![1.0; 21]),
            Err(CoopError::TooManyNodes { got: 21, max: 20 })
        ));
        assert!(CoopVector::new(vec![1.0, 1.01]).is_err());
        assert!(CoopVector::new(vec![-0.0, 1.0]).is_ok());
    }

    #[test]
    fn sort_and_permute_round_trip() {
        let loads = lv(&[0.6, 0.9, 0.7, 0.8]);
        let (sorted, order) = loads.sorted_desc();
        assert_eq!(sorted.as_slice(), &[0.9, 0.8, 0.7, 0.6]);
        assert_eq!(order, vec![1, 3, 2, 0]);
        let c = cv(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(c.permuted(&order).unwrap().unpermuted(&order).unwrap(), c);
        assert_eq!(loads.argmax(), 1);
    }

    #[test]
    fn state_mask_bits() {
        let s = StateMask::new(0b101, 3).unwrap();
        assert!(s.is_busy(0) && !s.is_busy(1) && s.is_busy(2));
        assert_eq!(s.set_busy(1).index(), 7);
        assert_eq!(s.set_idle(0).index(), 4);
        assert!(StateMask::new(0b1000, 3).is_none());
    }

    #[test]
    fn n2_row_with_full_cooperation() {
        let g = build_generator_n2(&lv(&[1.0, 1.0]), &cv(&[1.0, 1.0])).unwrap();
        assert_eq!(g.row(StateMask::from_index(1)), vec![1.0, -3.0, 0.0, 2.0]);
    }

    #[test]
    fn n2_row_without_cooperation() {
        let g = build_generator_n2(&lv(&[0.5, 0.5]), &cv(&[0.0, 0.0])).unwrap();
        assert_eq!(g.row(StateMask::from_index(0)), vec![-1.0, 0.5, 0.5, 0.0]);
        assert!(g.max_row_sum() < 1e-12);
    }

    #[test]
    fn n2_rejects_other_sizes() {
        let r = build_generator_n2(&lv(&[1.0, 1.0, 1.0]), &cv(&[1.0, 1.0, 1.0]));
        assert_eq!(r, Err(CoopError::NotTwoNodes(3)));
        let r = build_generator(&lv(&[1.0, 1.0]), &cv(&[1.0]));
        assert_eq!(r, Err(CoopError::DimensionMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn three_node_rates() {
        let g = build_generator(&lv(&[1.0, 1.0, 1.0]), &cv(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(g.rate(StateMask::from_index(0b000), StateMask::from_index(0b001)), 1.0);
        let g = build_generator(&lv(&[1.0, 1.0, 1.0]), &cv(&[1.0, 1.0, 1.0])).unwrap();
        // "011" in (s1 s2 s3) notation: nodes 2 and 3 busy, node 1 turns busy.
        let from = StateMask::new(0b110, 3).unwrap();
        assert_eq!(g.rate(from, from.set_busy(0)), 2.0);
        // only Hamming-distance-one transitions
        for s in StateMask::all(3) {
            for t in StateMask::all(3) {
                if s != t && (s.bits() ^ t.bits()).count_ones() != 1 {
                    assert_eq!(g.rate(s, t), 0.0);
                }
            }
        }
    }

    #[test]
    fn symmetric_full_cooperation_pair() {
        let pi = solve(&lv(&[1.0, 1.0]), &cv(&[1.0, 1.0])).unwrap();
        for (got, want) in pi.as_slice().iter().zip([0.2, 0.2, 0.2, 0.4]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn fair_pair_distribution() {
        let pi = solve(&lv(&[0.9, 0.8]), &cv(&[1.0, (8.0f64 / 9.0).powi(2)])).unwrap();
        let want = [1.0, 0.9, 0.8, 1.36].map(|x| x / 4.06);
        for (got, want) in pi.as_slice().iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn busy_count_distribution_sums_to_one() {
        let pi = solve(&lv(&[0.9, 0.8, 0.7]), &cv(&[1.0, 0.5, 0.2])).unwrap();
        let d = pi.busy_count_distribution();
        assert_eq!(d.len(), 4);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
