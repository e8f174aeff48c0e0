//! Performance measures derived from a steady state: blocking, acceptance
//! flows, cooperation ratios and the no-cooperation baselines.

use serde::{Deserialize, Serialize};

use crate::chain::{self, CoopVector, LoadVector, SteadyState};
use crate::error::{CoopError, Result};

/// A cooperation ratio `R_in / R_out`; undefined when nothing was outsourced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "Option<f64>", into = "Option<f64>")]
pub enum Ratio {
    Value(f64),
    Undefined,
}

impl Ratio {
    pub fn from_flows(inflow: f64, outflow: f64) -> Self {
        if outflow > 0.0 {
            Ratio::Value(inflow / outflow)
        } else {
            Ratio::Undefined
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Value(v) => Some(v),
            Ratio::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Ratio::Value(_))
    }
}

impl From<Option<f64>> for Ratio {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Ratio::Undefined, Ratio::Value)
    }
}

impl From<Ratio> for Option<f64> {
    fn from(r: Ratio) -> Self {
        r.value()
    }
}

/// Inbound/outbound accepted-task flows per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flows {
    pub r_in: Vec<f64>,
    pub r_out: Vec<f64>,
    pub ratios: Vec<Ratio>,
}

/// Everything measurable at one `(λ, p)` operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub loads: LoadVector,
    pub coop: CoopVector,
    pub pi: Vec<f64>,
    pub blocking: Vec<f64>,
    /// `accept[i][j]`: rate at which node `j` accepts tasks of node `i`.
    pub accept: Vec<Vec<f64>>,
    pub r_in: Vec<f64>,
    pub r_out: Vec<f64>,
    pub ratios: Vec<Ratio>,
    pub baselines: Vec<f64>,
    pub convenient: Vec<bool>,
}

impl MetricsReport {
    pub fn compute(loads: &LoadVector, coop: &CoopVector) -> Result<Self> {
        let pi = chain::solve(loads, coop)?;
        Self::from_steady_state(&pi, loads, coop)
    }

    pub fn from_steady_state(
        pi: &SteadyState,
        loads: &LoadVector,
        coop: &CoopVector,
    ) -> Result<Self> {
        let blocking = blocking(pi, coop)?;
        let accept = acceptance_matrix(pi, loads, coop)?;
        let Flows { r_in, r_out, ratios } = flows(&accept);
        let convenient = is_convenient(&blocking, loads)?;
        Ok(Self {
            loads: loads.clone(),
            coop: coop.clone(),
            pi: pi.as_slice().to_vec(),
            blocking,
            accept,
            r_in,
            r_out,
            ratios,
            baselines: baselines(loads),
            convenient,
        })
    }
}

fn check_dims(pi: &SteadyState, n: usize) -> Result<()> {
    if pi.n_nodes() == n {
        Ok(())
    } else {
        Err(CoopError::DimensionMismatch {
            expected: pi.n_nodes(),
            got: n,
        })
    }
}

/// Two-node blocking: `b_1 = π_11 + π_10 (1 - p_2)`, `b_2 = π_11 + π_01 (1 - p_1)`.
pub fn blocking_n2(pi: &SteadyState, coop: &CoopVector) -> Result<[f64; 2]> {
    if pi.n_nodes() != 2 {
        return Err(CoopError::NotTwoNodes(pi.n_nodes()));
    }
    check_dims(pi, coop.len())?;
    let p = pi.as_slice();
    let (pi10, pi01, pi11) = (p[1], p[2], p[3]);
    Ok([
        pi11 + pi10 * (1.0 - coop[1]),
        pi11 + pi01 * (1.0 - coop[0]),
    ])
}

/// Blocking probability of every node.
///
/// A task arriving at busy node `i` probes one of the other `N-1` nodes
/// uniformly; it is lost when the probed node is busy or refuses.
pub fn blocking(pi: &SteadyState, coop: &CoopVector) -> Result<Vec<f64>> {
    let n = coop.len();
    check_dims(pi, n)?;
    let fanout = (n - 1) as f64;
    let p = coop.as_slice();
    let mut b = vec![0.0; n];
    for (s, prob) in pi.iter() {
        if prob == 0.0 {
            continue;
        }
        for (i, bi) in b.iter_mut().enumerate() {
            if !s.is_busy(i) {
                continue;
            }
            let refused: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| if s.is_busy(j) { 1.0 } else { 1.0 - p[j] })
                .sum();
            *bi += prob * refused / fanout;
        }
    }
    Ok(b)
}

/// `a_ij = p_j/(N-1) · λ_i · P(s_i = 1, s_j = 0)`, zero diagonal.
pub fn acceptance_matrix(
    pi: &SteadyState,
    loads: &LoadVector,
    coop: &CoopVector,
) -> Result<Vec<Vec<f64>>> {
    let n = loads.len();
    check_dims(pi, n)?;
    check_dims(pi, coop.len())?;
    let fanout = (n - 1) as f64;
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        for (j, aij) in row.iter_mut().enumerate() {
            if i != j && coop[j] > 0.0 {
                *aij = coop[j] / fanout * loads[i] * pi.busy_idle_prob(i, j);
            }
        }
    }
    Ok(a)
}

/// `R_in_i = Σ_j a_ji` (work node `i` does for others),
/// `R_out_i = Σ_j a_ij` (work others do for node `i`).
pub fn flows(a: &[Vec<f64>]) -> Flows {
    let n = a.len();
    let r_in: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[j][i]).sum()).collect();
    let r_out: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let ratios = r_in
        .iter()
        .zip(&r_out)
        .map(|(&i, &o)| Ratio::from_flows(i, o))
        .collect();
    Flows { r_in, r_out, ratios }
}

/// Cooperation ratios at `(λ, p)` straight from the model.
pub fn model_ratios(loads: &LoadVector, coop: &CoopVector) -> Result<Vec<Ratio>> {
    let pi = chain::solve(loads, coop)?;
    Ok(flows(&acceptance_matrix(&pi, loads, coop)?).ratios)
}

/// Erlang-B blocking for one or two servers.
pub fn erlang_b(lambda: f64, servers: u32) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(CoopError::InvalidParameter {
            name: "lambda",
            reason: format!("must be positive, got {lambda}"),
        });
    }
    match servers {
        1 => Ok(lambda / (1.0 + lambda)),
        2 => Ok(lambda * lambda / (2.0 + 2.0 * lambda + lambda * lambda)),
        k => Err(CoopError::UnsupportedServers(k)),
    }
}

/// No-cooperation blocking `λ_i / (1 + λ_i)` of every node.
pub fn baselines(loads: &LoadVector) -> Vec<f64> {
    loads.as_slice().iter().map(|&l| l / (1.0 + l)).collect()
}

/// Smallest second load for which full two-node cooperation lowers both
/// blocking probabilities, for `λ_2 ≤ λ_1`.
///
/// Full cooperation of two nodes is a two-server loss system with load
/// `Λ = λ_1 + λ_2`. The lighter node gains iff `Λ² < 2 λ_2 (1 + Λ)`, which
/// reduces to `λ_2 > √(1 + λ_1²) - 1`.
pub fn critical_load(lambda1: f64) -> f64 {
    (1.0 + lambda1 * lambda1).sqrt() - 1.0
}

/// The threshold `√(1 + λ_1) - 1` as it is usually quoted. It overstates
/// [`critical_load`] for every `λ_1 ≠ 1`; kept for comparison.
pub fn quoted_critical_load(lambda1: f64) -> f64 {
    (1.0 + lambda1).sqrt() - 1.0
}

/// Strict improvement over the no-cooperation baseline, per node.
pub fn is_convenient(blocking: &[f64], loads: &LoadVector) -> Result<Vec<bool>> {
    if blocking.len() != loads.len() {
        return Err(CoopError::DimensionMismatch {
            expected: loads.len(),
            got: blocking.len(),
        });
    }
    Ok(blocking
        .iter()
        .zip(baselines(loads))
        .map(|(&b, b0)| b < b0)
        .collect())
}

/// Busy-server distribution of an `M/M/N/N` loss system with offered load
/// `total_load` (truncated Poisson).
pub fn erlang_loss_distribution(total_load: f64, servers: usize) -> Vec<f64> {
    let mut terms = Vec::with_capacity(servers + 1);
    let mut t = 1.0;
    terms.push(t);
    for m in 1..=servers {
        t *= total_load / m as f64;
        terms.push(t);
    }
    let z: f64 = terms.iter().sum();
    terms.into_iter().map(|x| x / z).collect()
}

/// Total-variation distance between the busy-count distribution of the
/// fully cooperating chain and an `M/M/N/N` queue with the summed load.
///
/// Exact for two nodes; for more nodes a blocked task probes a single
/// neighbour, so the pooled-server picture is only approximate.
pub fn full_cooperation_erlang_gap(loads: &LoadVector) -> Result<f64> {
    let n = loads.len();
    let pi = chain::solve(loads, &CoopVector::ones(n))?;
    let chain_dist = pi.busy_count_distribution();
    let erlang = erlang_loss_distribution(loads.total(), n);
    Ok(0.5
        * chain_dist
            .iter()
            .zip(&erlang)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}
