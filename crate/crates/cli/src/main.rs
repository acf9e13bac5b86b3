//! `nabqr`: simulate, clean, train, run, score and backtest from the shell.

mod args;
mod commands;
mod config;
mod manifest;
mod tables;

use std::process::ExitCode;

use clap::Parser;
use nabqr_core::{Error, ErrorKind};

use crate::args::{Cli, Command};

const EXIT_IO: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_NUMERICAL: u8 = 5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Clean(a) => commands::clean(&a),
        Command::Train(a) => commands::train(&a),
        Command::Run(a) => commands::run(&a),
        Command::Score(a) => commands::score(&a),
        Command::Backtest(a) => commands::backtest(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Io => EXIT_IO,
        ErrorKind::Validation => EXIT_VALIDATION,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

fn error_json(e: &Error) -> String {
    let kind = match e.kind() {
        ErrorKind::Io => "io",
        ErrorKind::Validation => "validation",
        ErrorKind::Numerical => "numerical",
    };
    let stage = match e {
        Error::Stage { stage, .. } => Some(*stage),
        _ => None,
    };
    serde_json::json!({
        "error": {
            "kind": kind,
            "stage": stage,
            "message": e.to_string(),
            "exit_code": exit_code(e),
        }
    })
    .to_string()
}
