use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1};

/// What happened at the event just processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Arrival served by its own idle node.
    Local { node: usize },
    /// Arrival at a busy node, accepted by the probed node `server`.
    Remote { origin: usize, server: usize },
    /// Arrival lost to the cloud.
    Blocked { node: usize },
    Departure { node: usize },
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Arrival { node: usize, generation: u64 },
    Departure { node: usize },
}

#[derive(Debug, Clone, Copy)]
struct Scheduled {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Reversed so the max-heap pops the earliest event; ties by insertion order.
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Event calendar of the N-node loss system.
///
/// Random streams: every node owns one stream for its arrivals and one for
/// the service times of tasks it runs; probe targets and accept decisions
/// share one more. All are ChaCha8 streams of the master seed, numbered
/// `2i`, `2i + 1` and `2N`.
#[derive(Debug, Clone)]
pub(crate) struct Engine {
    lambdas: Vec<f64>,
    coop: Vec<f64>,
    arrival_rng: Vec<ChaCha8Rng>,
    service_rng: Vec<ChaCha8Rng>,
    probe_rng: ChaCha8Rng,
    calendar: BinaryHeap<Scheduled>,
    busy: Vec<bool>,
    generation: Vec<u64>,
    now: f64,
    seq: u64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Engine {
    pub fn new(lambdas: &[f64], coop: &[f64], seed: u64) -> Self {
        let n = lambdas.len();
        let mut engine = Self {
            lambdas: lambdas.to_vec(),
            coop: coop.to_vec(),
            arrival_rng: (0..n).map(|i| stream(seed, 2 * i as u64)).collect(),
            service_rng: (0..n).map(|i| stream(seed, 2 * i as u64 + 1)).collect(),
            probe_rng: stream(seed, 2 * n as u64),
            calendar: BinaryHeap::new(),
            busy: vec![false; n],
            generation: vec![0; n],
            now: 0.0,
            seq: 0,
        };
        for i in 0..n {
            engine.schedule_arrival(i);
        }
        engine
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn coop(&self) -> &[f64] {
        &self.coop
    }

    pub fn set_coop(&mut self, node: usize, p: f64) {
        self.coop[node] = p;
    }

    pub fn set_all_coop(&mut self, p: &[f64]) {
        self.coop.copy_from_slice(p);
    }

    /// Changes arrival rates from now on. Pending arrivals are redrawn at
    /// the new rates, which is exact for Poisson streams.
    pub fn set_loads(&mut self, lambdas: &[f64]) {
        self.lambdas.copy_from_slice(lambdas);
        for i in 0..lambdas.len() {
            self.generation[i] += 1;
            self.schedule_arrival(i);
        }
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.calendar.push(Scheduled {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn schedule_arrival(&mut self, node: usize) {
        let gap = Exp::new(self.lambdas[node])
            .expect("arrival rates are validated positive")
            .sample(&mut self.arrival_rng[node]);
        let generation = self.generation[node];
        self.push(self.now + gap, EventKind::Arrival { node, generation });
    }

    fn start_service(&mut self, server: usize) {
        self.busy[server] = true;
        let s: f64 = Exp1.sample(&mut self.service_rng[server]);
        self.push(self.now + s, EventKind::Departure { node: server });
    }

    /// Time of the next live event, without consuming it.
    pub fn peek_time(&mut self) -> f64 {
        while let Some(ev) = self.calendar.peek() {
            if let EventKind::Arrival { node, generation } = ev.kind {
                if generation != self.generation[node] {
                    self.calendar.pop();
                    continue;
                }
            }
            return ev.time;
        }
        f64::INFINITY
    }

    pub fn step(&mut self) -> Outcome {
        loop {
            let ev = self.calendar.pop().expect("arrival streams never run dry");
            match ev.kind {
                EventKind::Arrival { node, generation } => {
                    if generation != self.generation[node] {
                        continue;
                    }
                    self.now = ev.time;
                    self.schedule_arrival(node);
                    return self.route(node);
                }
                EventKind::Departure { node } => {
                    self.now = ev.time;
                    self.busy[node] = false;
                    return Outcome::Departure { node };
                }
            }
        }
    }

    fn route(&mut self, node: usize) -> Outcome {
        if !self.busy[node] {
            self.start_service(node);
            return Outcome::Local { node };
        }
        let n = self.lambdas.len();
        let mut target = self.probe_rng.random_range(0..n - 1);
        if target >= node {
            target += 1;
        }
        let coin: f64 = self.probe_rng.random();
        if !self.busy[target] && coin < self.coop[target] {
            self.start_service(target);
            Outcome::Remote {
                origin: node,
                server: target,
            }
        } else {
            Outcome::Blocked { node }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_are_time_ordered() {
        let mut e = Engine::new(&[0.9, 0.8, 0.7], &[1.0, 0.5, 0.0], 7);
        let mut last = 0.0;
        for _ in 0..10_000 {
            e.step();
            assert!(e.now() >= last);
            last = e.now();
        }
    }

    #[test]
    fn zero_probability_node_never_serves_others() {
        let mut e = Engine::new(&[1.5, 1.5], &[1.0, 0.0], 3);
        for _ in 0..20_000 {
            if let Outcome::Remote { server, .. } = e.step() {
                assert_eq!(server, 0);
            }
        }
    }

    #[test]
    fn load_change_discards_stale_arrivals() {
        let mut e = Engine::new(&[0.5, 0.5], &[1.0, 1.0], 11);
        for _ in 0..100 {
            e.step();
        }
        e.set_loads(&[2.0, 0.1]);
        let mut arrivals = [0u32; 2];
        for _ in 0..20_000 {
            match e.step() {
                Outcome::Local { node } | Outcome::Blocked { node } => arrivals[node] += 1,
                Outcome::Remote { origin, .. } => arrivals[origin] += 1,
                Outcome::Departure { .. } => {}
            }
        }
        assert!(arrivals[0] > 10 * arrivals[1], "{arrivals:?}");
    }
}
