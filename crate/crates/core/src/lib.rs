//! Probabilistic cooperation among single-server fog nodes.
//!
//! * [`chain`]: the `2^N`-state Markov chain and its steady state.
//! * [`metrics`]: blocking, acceptance flows, cooperation ratios, baselines.
//! * [`closed_form`]: rational-function machinery for two nodes.
//! * [`optimizer`]: fair cooperation vectors for any N (fixed point and
//!   ratio-driven bisection), Pareto grids and diagnostics.
//! * [`sim`]: seeded discrete-event simulation of the loss system and of the
//!   token-ring tuning protocol.

pub mod chain;
pub mod closed_form;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod optimizer;
pub mod sim;

pub use chain::{CoopVector, Generator, LoadVector, StateMask, SteadyState};
pub use error::{CoopError, Result};
pub use exec::Exec;
pub use metrics::{MetricsReport, Ratio};
