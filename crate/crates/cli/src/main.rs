mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use moe_lpr::Error;

use crate::args::Cli;

/// Exit status per error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Checkpoint(_) => 3,
        Error::Numeric(_) | Error::Graph(_) => 4,
        Error::Io { .. } => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
