//! Command-line flags and scenario files.
//!
//! A scenario is a flat TOML document whose keys mirror the long flags
//! (`max-steps` becomes `max_steps`). Flags given on the command line win over
//! the file. Keys that a subcommand does not use are ignored, so one file can
//! drive several subcommands.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "fogcoop", version, about = "Probabilistic cooperation among fog nodes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Arrival rates, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub loads: Option<Vec<f64>>,
    /// Cooperation probabilities, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub coop: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Flat TOML file with default values for any flag
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Steady state and performance metrics at fixed probabilities
    Solve,
    /// Fair optimal probabilities by fixed-point iteration
    Optimal {
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Ratio-driven bisection search with its round-by-round trace
    Bisect {
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Two-node blocking grid over the unit square
    Pareto {
        /// Points per axis
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Critical second load for full two-node cooperation
    Convenience {
        /// First-node loads to tabulate, comma separated
        #[arg(long, value_delimiter = ',')]
        lambda1: Option<Vec<f64>>,
    },
    /// Discrete-event simulation at fixed probabilities
    Simulate {
        #[arg(long)]
        arrivals: Option<u64>,
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Token-ring tuning protocol
    Protocol {
        /// Counter threshold that triggers a tune
        #[arg(long)]
        k: Option<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Warm-up duration
        #[arg(long)]
        warmup: Option<f64>,
        /// Arrival cap
        #[arg(long)]
        arrivals: Option<u64>,
        /// Simulated-time horizon
        #[arg(long)]
        max_time: Option<f64>,
        /// Event trace, one JSON object per line
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Loads applied after tuning to exercise re-tuning
        #[arg(long, value_delimiter = ',')]
        retune_loads: Option<Vec<f64>>,
        /// How long to watch for a ratio change after new loads
        #[arg(long)]
        monitor_time: Option<f64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Optimal { .. } => "optimal",
            Command::Bisect { .. } => "bisect",
            Command::Pareto { .. } => "pareto",
            Command::Convenience { .. } => "convenience",
            Command::Simulate { .. } => "simulate",
            Command::Protocol { .. } => "protocol",
        }
    }
}

/// Every setting any subcommand reads.
#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub loads: Option<Vec<f64>>,
    pub coop: Option<Vec<f64>>,
    pub eps: Option<f64>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub max_iters: Option<usize>,
    pub max_steps: Option<usize>,
    pub grid: Option<usize>,
    pub lambda1: Option<Vec<f64>>,
    pub arrivals: Option<u64>,
    pub batches: Option<usize>,
    pub k: Option<u64>,
    pub rounds: Option<usize>,
    pub warmup: Option<f64>,
    pub max_time: Option<f64>,
    pub trace: Option<PathBuf>,
    pub retune_loads: Option<Vec<f64>>,
    pub monitor_time: Option<f64>,
}

impl Settings {
    pub fn from_cli(cli: &Cli) -> Self {
        let c = &cli.common;
        let mut s = Settings {
            loads: c.loads.clone(),
            coop: c.coop.clone(),
            eps: c.eps,
            tol: c.tol,
            seed: c.seed,
            out: c.out.clone(),
            format: c.format,
            ..Default::default()
        };
        match &cli.command {
            Command::Solve => {}
            Command::Optimal { max_iters } => s.max_iters = *max_iters,
            Command::Bisect { max_steps } => s.max_steps = *max_steps,
            Command::Pareto { grid } => s.grid = *grid,
            Command::Convenience { lambda1 } => s.lambda1 = lambda1.clone(),
            Command::Simulate { arrivals, batches } => {
                s.arrivals = *arrivals;
                s.batches = *batches;
            }
            Command::Protocol {
                k,
                rounds,
                warmup,
                arrivals,
                max_time,
                trace,
                retune_loads,
                monitor_time,
            } => {
                s.k = *k;
                s.rounds = *rounds;
                s.warmup = *warmup;
                s.arrivals = *arrivals;
                s.max_time = *max_time;
                s.trace = trace.clone();
                s.retune_loads = retune_loads.clone();
                s.monitor_time = *monitor_time;
            }
        }
        s
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading scenario {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing scenario {}", path.display()))
    }

    /// Fills every unset field from `fallback`.
    pub fn or(self, fallback: Settings) -> Settings {
        Settings {
            loads: self.loads.or(fallback.loads),
            coop: self.coop.or(fallback.coop),
            eps: self.eps.or(fallback.eps),
            tol: self.tol.or(fallback.tol),
            seed: self.seed.or(fallback.seed),
            out: self.out.or(fallback.out),
            format: self.format.or(fallback.format),
            max_iters: self.max_iters.or(fallback.max_iters),
            max_steps: self.max_steps.or(fallback.max_steps),
            grid: self.grid.or(fallback.grid),
            lambda1: self.lambda1.or(fallback.lambda1),
            arrivals: self.arrivals.or(fallback.arrivals),
            batches: self.batches.or(fallback.batches),
            k: self.k.or(fallback.k),
            rounds: self.rounds.or(fallback.rounds),
            warmup: self.warmup.or(fallback.warmup),
            max_time: self.max_time.or(fallback.max_time),
            trace: self.trace.or(fallback.trace),
            retune_loads: self.retune_loads.or(fallback.retune_loads),
            monitor_time: self.monitor_time.or(fallback.monitor_time),
        }
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or(Format::Csv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: Settings = toml::from_str(
            "loads = [0.9, 0.8]\neps = 0.1\nseed = 7\nformat = \"json\"\nmax_steps = 5\n",
        )
        .unwrap();
        let cli = Cli::parse_from(["fogcoop", "bisect", "--eps", "0.01", "--max-steps", "9"]);
        let s = Settings::from_cli(&cli).or(file);
        assert_eq!(s.loads, Some(vec![0.9, 0.8]));
        assert_eq!(s.eps, Some(0.01));
        assert_eq!(s.seed, Some(7));
        assert_eq!(s.max_steps, Some(9));
        assert_eq!(s.format(), Format::Json);
    }

    #[test]
    fn unknown_scenario_keys_are_rejected() {
        assert!(toml::from_str::<Settings>("lods = [1.0]").is_err());
    }

    #[test]
    fn global_flags_follow_the_subcommand() {
        let cli = Cli::parse_from(["fogcoop", "solve", "--loads", "1,1", "--coop", "0,0"]);
        assert_eq!(cli.common.loads, Some(vec![1.0, 1.0]));
        assert_eq!(cli.command.name(), "solve");
    }
}
