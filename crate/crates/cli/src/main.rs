//! `fogcoop` command-line tool.
//!
//! Exit status: 0 when every computation met its tolerance, 2 for invalid
//! input, 3 when a run finished without meeting its tolerance (output is
//! still written), 1 for any other failure.

mod commands;
mod output;
mod settings;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use fogcoop::CoopError;

use commands::{InvalidInput, Outcome};
use settings::{Cli, Command, Settings};

fn run(cli: &Cli) -> Result<Outcome> {
    let mut settings = Settings::from_cli(cli);
    if let Some(path) = &cli.common.scenario {
        let file = Settings::load_file(path)
            .map_err(|e| anyhow::anyhow!(InvalidInput(format!("{e:#}"))))?;
        settings = settings.or(file);
    }
    let outcome = match cli.command {
        Command::Solve => commands::solve(&settings),
        Command::Optimal { .. } => commands::optimal(&settings),
        Command::Bisect { .. } => commands::bisect(&settings),
        Command::Pareto { .. } => commands::pareto(&settings),
        Command::Convenience { .. } => commands::convenience(&settings),
        Command::Simulate { .. } => commands::simulate_cmd(&settings),
        Command::Protocol { .. } => commands::protocol(&settings),
    }?;
    output::emit(&outcome.bytes, settings.out.as_deref())?;
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome { unmet: None, .. }) => ExitCode::SUCCESS,
        Ok(Outcome {
            unmet: Some(reason),
            ..
        }) => {
            eprintln!("{}: {reason}", cli.command.name());
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let invalid = e.downcast_ref::<CoopError>().is_some()
                || e.downcast_ref::<InvalidInput>().is_some();
            ExitCode::from(if invalid { 2 } else { 1 })
        }
    }
}
