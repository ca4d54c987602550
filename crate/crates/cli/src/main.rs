mod cli;
mod commands;
mod error;
mod output;
mod settings;

use std::process::ExitCode;

use clap::Parser;

use crate::cli::{Cli, Command};
use crate::error::CliError;

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(k) = threads else {
        return Ok(());
    };
    if k == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(k)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot start {k} worker threads: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Evaluate(a) => commands::evaluate(a, config),
        Command::Iterate(a) => commands::iterate(a, config),
        Command::Simulate(a) => commands::simulate(a, config),
        Command::Coverage(a) => commands::coverage(a, config),
        Command::PolicyValue(a) => commands::policy_value(a, config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
