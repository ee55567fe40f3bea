//! `fsc-lab`: data generation, hard negatives, training, evaluation and merging.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, Failure};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::configure_threads() {
        eprintln!("fsc-lab: {e:#}");
        return ExitCode::from(2);
    }
    let name = cli.command.name();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("fsc-lab {name}: configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("fsc-lab {name}: {e:#}");
            ExitCode::from(3)
        }
    }
}
