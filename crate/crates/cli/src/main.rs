#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bench;
mod commands;
mod config;
mod error;
mod plot;
mod problem;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use crate::config::{Cli, RunConfig};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "[{}] {}", record.level(), record.args()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (kind, flags) = cli.command.split();
    let result = RunConfig::resolve(kind, flags).and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spikesolve: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
