use anyhow::{anyhow, Result};
use fogcoop::closed_form::optimal_pair;
use fogcoop::metrics::{critical_load, quoted_critical_load, MetricsReport};
use fogcoop::optimizer::{
    centralized_bisect, fixed_point, g_residual, pareto_scan, FixedPointOptions, SolveReport,
    DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use fogcoop::sim::{simulate, trigger_retune, ProtocolSession, SimConfig, SimReport};
use fogcoop::{CoopVector, Exec, LoadVector};
use serde::{Deserialize, Serialize};

use crate::output::{flag, json, json_lines, num, numbered, ratio, Table};
use crate::settings::{Format, Settings};

/// Largest N accepted by commands that solve the chain densely.
pub const DENSE_MAX_NODES: usize = 12;

/// Bad input; exits with status 2.
#[derive(Debug)]
pub struct InvalidInput(pub String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(InvalidInput(msg.into()))
}

/// Rendered output plus the reason a tolerance was missed, if any.
pub struct Outcome {
    pub bytes: Vec<u8>,
    pub unmet: Option<String>,
}

impl Outcome {
    fn met(bytes: Vec<u8>) -> Self {
        Self { bytes, unmet: None }
    }
}

fn loads(s: &Settings) -> Result<LoadVector> {
    let v = s.loads.clone().ok_or_else(|| invalid("--loads is required"))?;
    Ok(LoadVector::new(v)?)
}

fn dense_loads(s: &Settings) -> Result<LoadVector> {
    let l = loads(s)?;
    if l.len() > DENSE_MAX_NODES {
        return Err(invalid(format!(
            "{} nodes requested; dense solves are limited to {DENSE_MAX_NODES}",
            l.len()
        )));
    }
    Ok(l)
}

fn coop(s: &Settings, n: usize) -> Result<CoopVector> {
    let v = s.coop.clone().ok_or_else(|| invalid("--coop is required"))?;
    if v.len() != n {
        return Err(invalid(format!("--coop has {} entries for {n} nodes", v.len())));
    }
    Ok(CoopVector::new(v)?)
}

fn node_table(m: &MetricsReport) -> Table {
    let mut t = Table::new([
        "node", "lambda", "p", "blocking", "baseline", "convenient", "r_in", "r_out", "ratio",
    ]);
    for i in 0..m.loads.len() {
        t.push(vec![
            (i + 1).to_string(),
            num(m.loads[i]),
            num(m.coop[i]),
            num(m.blocking[i]),
            num(m.baselines[i]),
            flag(m.convenient[i]),
            num(m.r_in[i]),
            num(m.r_out[i]),
            ratio(m.ratios[i]),
        ]);
    }
    t
}

pub fn solve(s: &Settings) -> Result<Outcome> {
    let l = dense_loads(s)?;
    let p = coop(s, l.len())?;
    let m = MetricsReport::compute(&l, &p)?;
    let bytes = match s.format() {
        Format::Json => json(&m)?,
        Format::Csv => node_table(&m).to_csv()?,
    };
    Ok(Outcome::met(bytes))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AnalyticPair {
    pub p: Vec<f64>,
    pub swap_applied: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimalOutput {
    pub solve: SolveReport,
    pub g: f64,
    pub metrics: MetricsReport,
    pub analytic: Option<AnalyticPair>,
}

pub fn optimal(s: &Settings) -> Result<Outcome> {
    let l = dense_loads(s)?;
    let opts = FixedPointOptions {
        tol: s.tol.unwrap_or(DEFAULT_TOL),
        max_iters: s.max_iters.unwrap_or(DEFAULT_MAX_ITERS),
    };
    let solve = fixed_point(&l, opts)?;
    let metrics = MetricsReport::compute(&l, &solve.p_star)?;
    let g = g_residual(&l, &solve.p_star)?;
    let analytic = if l.len() == 2 {
        let pair = optimal_pair(&l)?;
        if pair.swap_applied {
            eprintln!("note: node 2 carries the larger load; it is the one kept at p = 1");
        }
        Some(AnalyticPair {
            p: pair.coop().as_slice().to_vec(),
            swap_applied: pair.swap_applied,
        })
    } else {
        None
    };
    let unmet = if !solve.converged {
        Some(format!("fixed point did not converge in {} iterations", solve.iterations))
    } else if !solve.feasible {
        Some("fixed point left the feasible region".to_string())
    } else {
        None
    };
    let out = OptimalOutput {
        solve,
        g,
        metrics,
        analytic,
    };
    let bytes = match s.format() {
        Format::Json => json(&out)?,
        Format::Csv => {
            let mut header = vec!["node", "lambda", "p", "blocking", "baseline", "convenient"];
            if out.analytic.is_some() {
                header.push("p_analytic");
            }
            let mut t = Table::new(header);
            let m = &out.metrics;
            for i in 0..l.len() {
                let mut row = vec![
                    (i + 1).to_string(),
                    num(l[i]),
                    num(m.coop[i]),
                    num(m.blocking[i]),
                    num(m.baselines[i]),
                    flag(m.convenient[i]),
                ];
                if let Some(a) = &out.analytic {
                    row.push(num(a.p[i]));
                }
                t.push(row);
            }
            t.to_csv()?
        }
    };
    Ok(Outcome { bytes, unmet })
}

pub fn bisect(s: &Settings) -> Result<Outcome> {
    let l = dense_loads(s)?;
    let eps = s.eps.unwrap_or(1e-2);
    let max_steps = s.max_steps.unwrap_or(1_000);
    let (report, trace) = centralized_bisect(&l, eps, max_steps)?;
    let unmet = (!report.converged)
        .then(|| format!("step budget of {max_steps} bisections exhausted"));
    let bytes = match s.format() {
        Format::Json => json(&serde_json::json!({ "report": report, "trace": trace }))?,
        Format::Csv => {
            let n = l.len();
            let header = std::iter::once("round".to_string())
                .chain(numbered("r", n))
                .chain(std::iter::once("selected".to_string()))
                .chain(numbered("p", n));
            let mut t = Table::new(header);
            for (k, round) in trace.rounds.iter().enumerate() {
                let mut row = vec![(k + 1).to_string()];
                row.extend(round.ratios.iter().map(|&r| ratio(r)));
                row.push(round.selected.map(|j| (j + 1).to_string()).unwrap_or_default());
                row.extend(round.p.as_slice().iter().map(|&x| num(x)));
                t.push(row);
            }
            t.to_csv()?
        }
    };
    Ok(Outcome { bytes, unmet })
}

pub fn pareto(s: &Settings) -> Result<Outcome> {
    let l = loads(s)?;
    let cells = pareto_scan(&l, s.grid.unwrap_or(21), Exec::default())?;
    let bytes = match s.format() {
        Format::Json => json(&cells)?,
        Format::Csv => {
            let mut t = Table::new([
                "p1",
                "p2",
                "b1",
                "b2",
                "convenient1",
                "convenient2",
                "fair_residual",
            ]);
            for c in &cells {
                t.push(vec![
                    num(c.p1),
                    num(c.p2),
                    num(c.b1),
                    num(c.b2),
                    flag(c.convenient1),
                    flag(c.convenient2),
                    num(c.fair_residual),
                ]);
            }
            t.to_csv()?
        }
    };
    Ok(Outcome::met(bytes))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ConvenienceRow {
    pub lambda1: f64,
    pub lambda_c: f64,
    pub lambda_c_quoted: f64,
}

pub fn convenience(s: &Settings) -> Result<Outcome> {
    let lambdas = match &s.lambda1 {
        Some(v) => v.clone(),
        None => (1..=40).map(|i| i as f64 * 0.05).collect(),
    };
    if let Some(bad) = lambdas.iter().find(|&&x| !(x.is_finite() && x > 0.0)) {
        return Err(invalid(format!("--lambda1 values must be positive, got {bad}")));
    }
    let rows: Vec<ConvenienceRow> = lambdas
        .iter()
        .map(|&l1| ConvenienceRow {
            lambda1: l1,
            lambda_c: critical_load(l1),
            lambda_c_quoted: quoted_critical_load(l1),
        })
        .collect();
    let bytes = match s.format() {
        Format::Json => json(&rows)?,
        Format::Csv => {
            let mut t = Table::new(["lambda1", "lambda_c", "lambda_c_quoted"]);
            for r in &rows {
                t.push(vec![num(r.lambda1), num(r.lambda_c), num(r.lambda_c_quoted)]);
            }
            t.to_csv()?
        }
    };
    Ok(Outcome::met(bytes))
}

fn sim_table(r: &SimReport, loads: &LoadVector, p: &[f64]) -> Table {
    let mut t = Table::new([
        "node",
        "lambda",
        "p",
        "arrivals",
        "blocked",
        "served_local",
        "served_remote",
        "accepted_for_others",
        "blocking",
        "blocking_se",
        "ratio",
    ]);
    for (i, c) in r.nodes.iter().enumerate() {
        t.push(vec![
            (i + 1).to_string(),
            num(loads[i]),
            num(p[i]),
            c.arrivals.to_string(),
            c.blocked.to_string(),
            c.served_local.to_string(),
            c.served_remote.to_string(),
            c.accepted_for_others.to_string(),
            num(r.blocking[i].value),
            r.blocking[i].se.map(num).unwrap_or_default(),
            ratio(r.ratios[i]),
        ]);
    }
    t
}

pub fn simulate_cmd(s: &Settings) -> Result<Outcome> {
    let l = loads(s)?;
    let p = coop(s, l.len())?;
    let mut cfg = SimConfig::new(l.clone(), p.clone());
    cfg.seed = s.seed.unwrap_or(cfg.seed);
    cfg.max_arrivals = s.arrivals.unwrap_or(cfg.max_arrivals);
    cfg.batches = s.batches.unwrap_or(cfg.batches);
    eprintln!("seed {}", cfg.seed);
    let report = simulate(&cfg)?;
    let bytes = match s.format() {
        Format::Json => json(&report)?,
        Format::Csv => sim_table(&report, &l, p.as_slice()).to_csv()?,
    };
    Ok(Outcome::met(bytes))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ProtocolSummary {
    pub seed: u64,
    pub completed: bool,
    pub starvations: usize,
    pub ring: Vec<usize>,
    pub pinned: Option<usize>,
    pub final_coop: Vec<f64>,
    pub report: SimReport,
}

pub fn protocol(s: &Settings) -> Result<Outcome> {
    let l = dense_loads(s)?;
    let mut cfg = SimConfig::protocol(l.clone());
    cfg.seed = s.seed.unwrap_or(cfg.seed);
    cfg.k = s.k.unwrap_or(cfg.k);
    cfg.eps = s.eps.unwrap_or(cfg.eps);
    cfg.rounds = s.rounds.unwrap_or(cfg.rounds);
    cfg.warmup = s.warmup.or(cfg.warmup);
    cfg.max_arrivals = s.arrivals.unwrap_or(cfg.max_arrivals);
    cfg.max_time = s.max_time.or(cfg.max_time);
    let retune = s.retune_loads.clone().map(LoadVector::new).transpose()?;
    if let Some(r) = &retune {
        if r.len() != l.len() {
            return Err(invalid("--retune-loads must have one entry per node"));
        }
    }
    eprintln!("seed {}", cfg.seed);
    let mut session = ProtocolSession::new(cfg.clone())?;
    session.run()?;
    if let Some(new_loads) = retune {
        trigger_retune(&mut session, new_loads, s.monitor_time.unwrap_or(50_000.0))?;
    }
    if let Some(path) = &s.trace {
        crate::output::emit(&json_lines(session.trace())?, Some(path))?;
    }
    let summary = ProtocolSummary {
        seed: cfg.seed,
        completed: !session.is_stopped(),
        starvations: session.starvations(),
        ring: session.ring().to_vec(),
        pinned: session.pinned(),
        final_coop: session.coop().as_slice().to_vec(),
        report: session.report(),
    };
    let unmet = if !summary.completed {
        Some("arrival cap or time horizon reached before tuning finished".to_string())
    } else if summary.starvations > 0 {
        Some(format!("{} token holder(s) starved", summary.starvations))
    } else {
        None
    };
    let bytes = match s.format() {
        Format::Json => json(&summary)?,
        Format::Csv => {
            // loads in force at the end of the run
            let current = match s.retune_loads.clone() {
                Some(v) => LoadVector::new(v)?,
                None => l.clone(),
            };
            sim_table(&summary.report, &current, &summary.final_coop).to_csv()?
        }
    };
    Ok(Outcome { bytes, unmet })
}
