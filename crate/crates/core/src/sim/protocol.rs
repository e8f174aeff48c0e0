//! Token-ring tuning protocol.
//!
//! 1. Warm-up: every node cooperates fully for `ΔT` and counts the tasks it
//!    ran for others (`in`) and its own tasks run elsewhere (`out`).
//! 2. The initiator orders nodes by `r = in/out`, highest first. The node
//!    with the lowest ratio is left out of the ring and keeps `p = 1`.
//! 3. A token makes `R` laps of the ring. The holder resets its bracket to
//!    `[0, 1]` and, each time `in` or `out` reaches `k`, computes `r`, resets
//!    both counters and bisects: `r ≥ 1 + ε` lowers the upper end to `p`,
//!    `r ≤ 1 - ε` raises the lower end to `p`, and `p` moves to the bracket
//!    midpoint. Inside the deadband, or once the bracket is no wider than
//!    `ε`, the token moves on.
//!
//! Messages are instantaneous and lossless.

use serde::{Deserialize, Serialize};

use super::{Engine, Outcome, Recorder, SimConfig, SimReport};
use crate::chain::{CoopVector, LoadVector};
use crate::error::{CoopError, Result};
use crate::metrics::{MetricsReport, Ratio};

/// Largest N for which the warm-up length is sized from the exact chain.
const AUTO_WARMUP_MAX_NODES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettleCause {
    RatioConverged,
    IntervalCollapsed,
}

/// One protocol event. Node indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    WarmupStart {
        time: f64,
        duration: f64,
    },
    WarmupEnd {
        time: f64,
        inbound: Vec<u64>,
        outbound: Vec<u64>,
        ratios: Vec<Ratio>,
    },
    RingFormed {
        time: f64,
        order: Vec<usize>,
        pinned: usize,
    },
    TokenPass {
        time: f64,
        lap: usize,
        to: usize,
    },
    Tune {
        time: f64,
        lap: usize,
        node: usize,
        inbound: u64,
        outbound: u64,
        ratio: Ratio,
        lo: f64,
        hi: f64,
        p: f64,
    },
    Settled {
        time: f64,
        lap: usize,
        node: usize,
        ratio: Ratio,
        p: f64,
        cause: SettleCause,
    },
    Starvation {
        time: f64,
        lap: usize,
        node: usize,
    },
    Finished {
        time: f64,
        coop: Vec<f64>,
    },
    LoadChange {
        time: f64,
        loads: Vec<f64>,
    },
    Retrigger {
        time: f64,
        node: usize,
        ratio: Ratio,
    },
    RetuneFailed {
        time: f64,
        node: usize,
        ratio: Ratio,
    },
}

/// Result of a complete protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub report: SimReport,
    pub trace: Vec<TraceEvent>,
    pub final_coop: CoopVector,
    /// False when the arrival cap or time horizon cut the run short.
    pub completed: bool,
    pub starvations: usize,
}

fn as_decision_value(r: Ratio) -> f64 {
    r.value().unwrap_or(f64::INFINITY)
}

/// A live protocol run that can be resumed after load changes.
#[derive(Debug, Clone)]
pub struct ProtocolSession {
    config: SimConfig,
    loads: LoadVector,
    engine: Engine,
    recorder: Recorder,
    trace: Vec<TraceEvent>,
    ring: Vec<usize>,
    pinned: Option<usize>,
    warmup_duration: f64,
    stopped: bool,
    /// Ratios measured right after tuning, the reference for the monitor.
    baseline: Option<Vec<Option<Ratio>>>,
}

impl ProtocolSession {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        if !config.protocol_enabled {
            return Err(CoopError::InvalidParameter {
                name: "protocol_enabled",
                reason: "protocol runs need protocol_enabled = true".into(),
            });
        }
        let n = config.loads.len();
        let engine = Engine::new(config.loads.as_slice(), &vec![1.0; n], config.seed);
        let batch = config.max_arrivals.div_ceil(config.batches as u64);
        Ok(Self {
            loads: config.loads.clone(),
            recorder: Recorder::new(n, batch),
            engine,
            config,
            trace: Vec::new(),
            ring: Vec::new(),
            pinned: None,
            warmup_duration: 0.0,
            stopped: false,
            baseline: None,
        })
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn ring(&self) -> &[usize] {
        &self.ring
    }

    pub fn pinned(&self) -> Option<usize> {
        self.pinned
    }

    pub fn coop(&self) -> CoopVector {
        CoopVector::new(self.engine.coop().to_vec()).expect("protocol keeps p in [0, 1]")
    }

    pub fn now(&self) -> f64 {
        self.engine.now()
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn report(&self) -> SimReport {
        self.recorder.finish(self.config.seed, self.engine.now())
    }

    pub fn starvations(&self) -> usize {
        self.trace
            .iter()
            .filter(|e| matches!(e, TraceEvent::Starvation { .. }))
            .count()
    }

    fn advance(&mut self) -> Option<Outcome> {
        if self.stopped {
            return None;
        }
        let horizon = self.config.max_time.unwrap_or(f64::INFINITY);
        if self.recorder.total_arrivals() >= self.config.max_arrivals
            || self.engine.peek_time() > horizon
        {
            self.stopped = true;
            return None;
        }
        let out = self.engine.step();
        self.recorder.record(out, self.engine.now());
        Some(out)
    }

    fn auto_warmup(&self) -> Result<f64> {
        let n = self.loads.len();
        if n > AUTO_WARMUP_MAX_NODES {
            return Err(CoopError::InvalidParameter {
                name: "warmup",
                reason: format!("set explicitly for more than {AUTO_WARMUP_MAX_NODES} nodes"),
            });
        }
        let m = MetricsReport::compute(&self.loads, &CoopVector::ones(n))?;
        let slowest = m
            .r_in
            .iter()
            .chain(&m.r_out)
            .copied()
            .fold(f64::INFINITY, f64::min);
        Ok(10.0 * self.config.k as f64 / slowest)
    }

    /// Warm-up phase followed by the configured number of token laps.
    pub fn run(&mut self) -> Result<()> {
        self.baseline = None;
        self.warmup()?;
        self.tuning_laps(self.config.rounds);
        Ok(())
    }

    fn warmup(&mut self) -> Result<()> {
        let n = self.loads.len();
        let duration = match self.config.warmup {
            Some(t) => t,
            None => self.auto_warmup()?,
        };
        self.warmup_duration = duration;
        self.engine.set_all_coop(&vec![1.0; n]);
        let start = self.engine.now();
        self.trace.push(TraceEvent::WarmupStart {
            time: start,
            duration,
        });
        let end = start + duration;
        let mut inbound = vec![0u64; n];
        let mut outbound = vec![0u64; n];
        while self.engine.peek_time() <= end {
            match self.advance() {
                Some(Outcome::Remote { origin, server }) => {
                    inbound[server] += 1;
                    outbound[origin] += 1;
                }
                Some(_) => {}
                None => break,
            }
        }
        let ratios: Vec<Ratio> = inbound
            .iter()
            .zip(&outbound)
            .map(|(&i, &o)| Ratio::from_flows(i as f64, o as f64))
            .collect();
        let (order, pinned) = ring_order(&ratios);
        let time = self.engine.now().max(end);
        self.trace.push(TraceEvent::WarmupEnd {
            time,
            inbound,
            outbound,
            ratios,
        });
        self.trace.push(TraceEvent::RingFormed {
            time,
            order: order.clone(),
            pinned,
        });
        self.ring = order;
        self.pinned = Some(pinned);
        Ok(())
    }

    fn tuning_laps(&mut self, laps: usize) {
        'laps: for lap in 0..laps {
            for idx in 0..self.ring.len() {
                let node = self.ring[idx];
                self.trace.push(TraceEvent::TokenPass {
                    time: self.engine.now(),
                    lap,
                    to: node,
                });
                self.hold_token(node, lap);
                if self.stopped {
                    break 'laps;
                }
            }
        }
        if !self.stopped {
            self.trace.push(TraceEvent::Finished {
                time: self.engine.now(),
                coop: self.engine.coop().to_vec(),
            });
        }
    }

    fn starvation_timeout(&self) -> f64 {
        self.config
            .starvation_timeout
            .unwrap_or(10.0 * self.warmup_duration)
    }

    fn hold_token(&mut self, node: usize, lap: usize) {
        let k = self.config.k;
        let eps = self.config.eps;
        let timeout = self.starvation_timeout();
        let (mut lo, mut hi) = (0.0, 1.0);
        let (mut inbound, mut outbound) = (0u64, 0u64);
        let mut since = self.engine.now();
        loop {
            if self.engine.peek_time() > since + timeout {
                self.trace.push(TraceEvent::Starvation {
                    time: self.engine.now(),
                    lap,
                    node,
                });
                return;
            }
            let Some(out) = self.advance() else { return };
            if let Outcome::Remote { origin, server } = out {
                if server == node {
                    inbound += 1;
                }
                if origin == node {
                    outbound += 1;
                }
            }
            if inbound < k && outbound < k {
                continue;
            }
            let ratio = Ratio::from_flows(inbound as f64, outbound as f64);
            let r = as_decision_value(ratio);
            let (seen_in, seen_out) = (inbound, outbound);
            inbound = 0;
            outbound = 0;
            since = self.engine.now();
            let p = self.engine.coop()[node];
            let open = hi - lo > eps;
            if open && (r >= 1.0 + eps || r <= 1.0 - eps) {
                if r >= 1.0 + eps {
                    hi = p;
                } else {
                    lo = p;
                }
                let next = 0.5 * (lo + hi);
                self.engine.set_coop(node, next);
                self.trace.push(TraceEvent::Tune {
                    time: self.engine.now(),
                    lap,
                    node,
                    inbound: seen_in,
                    outbound: seen_out,
                    ratio,
                    lo,
                    hi,
                    p: next,
                });
                continue;
            }
            let cause = if (r - 1.0).abs() < eps {
                SettleCause::RatioConverged
            } else {
                SettleCause::IntervalCollapsed
            };
            self.trace.push(TraceEvent::Settled {
                time: self.engine.now(),
                lap,
                node,
                ratio,
                p,
                cause,
            });
            return;
        }
    }

    /// Changes the arrival rates from the current simulated time on.
    pub fn change_loads(&mut self, loads: LoadVector) -> Result<()> {
        if loads.len() != self.loads.len() {
            return Err(CoopError::DimensionMismatch {
                expected: self.loads.len(),
                got: loads.len(),
            });
        }
        self.engine.set_loads(loads.as_slice());
        self.trace.push(TraceEvent::LoadChange {
            time: self.engine.now(),
            loads: loads.as_slice().to_vec(),
        });
        self.loads = loads;
        Ok(())
    }

    /// Records each node's ratio over one window of `monitor_k` counted
    /// tasks. Nodes that see no full window within the starvation timeout
    /// get no reference and are not monitored.
    pub fn calibrate(&mut self) {
        let n = self.loads.len();
        let window = self.config.monitor_k;
        let end = self.engine.now() + self.starvation_timeout();
        let mut inbound = vec![0u64; n];
        let mut outbound = vec![0u64; n];
        let mut seen: Vec<Option<Ratio>> = vec![None; n];
        while seen.iter().any(Option::is_none) && self.engine.peek_time() <= end {
            let Some(out) = self.advance() else { break };
            let Outcome::Remote { origin, server } = out else {
                continue;
            };
            inbound[server] += 1;
            outbound[origin] += 1;
            for j in [server, origin] {
                if seen[j].is_none() && (inbound[j] >= window || outbound[j] >= window) {
                    seen[j] = Some(Ratio::from_flows(inbound[j] as f64, outbound[j] as f64));
                }
            }
        }
        self.baseline = Some(seen);
    }

    /// Watches every node's ratio over windows of `monitor_k` counted tasks
    /// for up to `duration`. Returns the first node whose ratio moved more
    /// than the retune threshold away from its post-tuning reference.
    /// Calibrates first if needed.
    pub fn monitor(&mut self, duration: f64) -> Option<(usize, Ratio)> {
        if self.baseline.is_none() {
            self.calibrate();
        }
        let baseline = self.baseline.clone().unwrap_or_default();
        let n = self.loads.len();
        let window = self.config.monitor_k;
        let threshold = self.config.retune_threshold;
        let end = self.engine.now() + duration;
        let mut inbound = vec![0u64; n];
        let mut outbound = vec![0u64; n];
        while self.engine.peek_time() <= end {
            let Some(out) = self.advance() else { break };
            let Outcome::Remote { origin, server } = out else {
                continue;
            };
            inbound[server] += 1;
            outbound[origin] += 1;
            for j in [server, origin] {
                if inbound[j] >= window || outbound[j] >= window {
                    let ratio = Ratio::from_flows(inbound[j] as f64, outbound[j] as f64);
                    inbound[j] = 0;
                    outbound[j] = 0;
                    if baseline[j].is_some_and(|b| moved(b, ratio, threshold)) {
                        return Some((j, ratio));
                    }
                }
            }
        }
        None
    }
}

fn moved(reference: Ratio, now: Ratio, threshold: f64) -> bool {
    match (reference, now) {
        (Ratio::Value(a), Ratio::Value(b)) => (a - b).abs() > threshold,
        (Ratio::Undefined, Ratio::Undefined) => false,
        _ => true,
    }
}

/// Ring order by decreasing ratio (undefined counts as infinite, ties by
/// index) and the excluded lowest-ratio node (ties: lowest index).
fn ring_order(ratios: &[Ratio]) -> (Vec<usize>, usize) {
    let key = |i: usize| as_decision_value(ratios[i]);
    let mut pinned = 0;
    for i in 1..ratios.len() {
        if key(i) < key(pinned) {
            pinned = i;
        }
    }
    let mut order: Vec<usize> = (0..ratios.len()).filter(|&i| i != pinned).collect();
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    (order, pinned)
}

/// Runs warm-up and tuning to completion.
pub fn run_protocol(config: &SimConfig) -> Result<ProtocolOutcome> {
    let mut session = ProtocolSession::new(config.clone())?;
    session.run()?;
    Ok(ProtocolOutcome {
        report: session.report(),
        final_coop: session.coop(),
        completed: !session.is_stopped(),
        starvations: session.starvations(),
        trace: session.trace,
    })
}

/// Applies new loads to a tuned session and reacts.
///
/// The session is monitored for up to `monitor_time`. If a node's ratio
/// moves away from its post-tuning reference by more than the retune
/// threshold, the ring is re-tuned with the configured number of laps. The
/// round fails when some ring node ends its turn asking for more than full
/// cooperation (`p` pushed against 1 while `r ≤ 1 - ε`), which happens when
/// the pinned node is no longer the most loaded one. A failed round starts
/// over from a fresh warm-up. Returns the events appended by this call.
pub fn trigger_retune(
    session: &mut ProtocolSession,
    new_loads: LoadVector,
    monitor_time: f64,
) -> Result<Vec<TraceEvent>> {
    if session.pinned.is_none() {
        return Err(CoopError::InvalidParameter {
            name: "session",
            reason: "re-tuning needs a completed protocol run".into(),
        });
    }
    if session.baseline.is_none() {
        session.calibrate();
    }
    let first = session.trace.len();
    session.change_loads(new_loads)?;
    if let Some((node, ratio)) = session.monitor(monitor_time) {
        session.trace.push(TraceEvent::Retrigger {
            time: session.engine.now(),
            node,
            ratio,
        });
        let laps_from = session.trace.len();
        session.tuning_laps(session.config.rounds);
        let eps = session.config.eps;
        let saturated = session.trace[laps_from..].iter().find_map(|e| match *e {
            TraceEvent::Settled {
                node, ratio, p, ..
            } if p >= 1.0 - eps && as_decision_value(ratio) <= 1.0 - eps => Some((node, ratio)),
            _ => None,
        });
        if let Some((node, ratio)) = saturated {
            if !session.stopped {
                session.trace.push(TraceEvent::RetuneFailed {
                    time: session.engine.now(),
                    node,
                    ratio,
                });
                session.run()?;
            }
        } else {
            session.baseline = None;
        }
    }
    Ok(session.trace[first..].to_vec())
}
