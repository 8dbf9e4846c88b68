//! The `tgcnet` command line: `train`, `eval`, `trace` and `summarize`.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.

pub mod args;
pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod records;
pub mod stats;

use std::ffi::OsString;

use clap::Parser;
use serde::Serialize;

pub use args::{Cli, Command};
pub use error::{CliError, EXIT_CONFIG, EXIT_RUNTIME};

fn print_json<T: Serialize>(value: &T) {
    match serde_json::to_string(value) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("error: {e}"),
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => print_json(&commands::train(&a)?),
        Command::Eval(a) => print_json(&commands::eval(&a)?),
        Command::Trace(a) => {
            let lines = commands::trace(&a)?;
            let edges: usize = lines.iter().map(|l| l.edges).sum();
            print_json(&serde_json::json!({
                "episodes": a.episodes,
                "steps": lines.len(),
                "mean_edges_per_step": edges as f64 / lines.len().max(1) as f64,
            }));
        }
        Command::Summarize(a) => {
            for s in commands::summarize(&a)? {
                print_json(&s);
            }
        }
    }
    Ok(())
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
