mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use sticker_core::Error;

use crate::args::{Cli, Command};

/// Exit status classes.
const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::TrainingFault(_) => EXIT_NUMERIC,
        Error::Dimension(_)
        | Error::Corpus(_)
        | Error::Record { .. }
        | Error::MissingImage { .. }
        | Error::Checkpoint(_)
        | Error::Image(_)
        | Error::Json(_) => EXIT_DATA,
        Error::Io(_) => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Rank(a) => commands::rank(a),
        Command::Attention(a) => commands::attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
