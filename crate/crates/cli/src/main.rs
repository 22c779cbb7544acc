mod args;
mod commands;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;

use anyhow::Result;
use clap::{ArgMatches, CommandFactory, FromArgMatches};

use args::{merge_config, Cli, Command};
use commands::InvariantViolation;

/// Usage, input and computation errors.
const EXIT_ERROR: u8 = 2;
/// A finished run failed its own consistency recheck, or the tool panicked.
const EXIT_INVARIANT: u8 = 3;

fn dispatch(command: Command, matches: &ArgMatches) -> Result<()> {
    match command {
        Command::Simulate(a) => {
            let config = a.config.clone();
            commands::simulate(&merge_config(a, matches, config.as_deref())?)
        }
        Command::Select(a) => {
            let config = a.config.clone();
            commands::select(&merge_config(a, matches, config.as_deref())?)
        }
        Command::Submap(a) => {
            let config = a.config.clone();
            commands::submap(&merge_config(a, matches, config.as_deref())?)
        }
        Command::Summarize(a) => {
            let config = a.config.clone();
            commands::summarize_cmd(&merge_config(a, matches, config.as_deref())?)
        }
        Command::Eval(a) => {
            let config = a.config.clone();
            commands::eval(&merge_config(a, matches, config.as_deref())?)
        }
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_ERROR);
        }
    };
    let (_, sub) = matches.subcommand().expect("a subcommand is required");
    match panic::catch_unwind(AssertUnwindSafe(|| dispatch(cli.command, sub))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            if e.is::<InvariantViolation>() {
                ExitCode::from(EXIT_INVARIANT)
            } else {
                ExitCode::from(EXIT_ERROR)
            }
        }
        Err(_) => ExitCode::from(EXIT_INVARIANT),
    }
}
