//! Command-line front end for `late-balance`.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use clap::Parser;

pub use config::{Cli, Command, Flags, RunConfig};
pub use error::CliError;

/// Runs one command from resolved configuration.
pub fn execute(config: &RunConfig) -> Result<(), CliError> {
    match config.command {
        Command::Estimate => commands::estimate::run(config),
        Command::Simulate => commands::simulate::run(config),
        Command::Cv => commands::cv::run(config),
        Command::BalanceReport => commands::balance::run(config),
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (command, flags) = cli.command.split();
    let result = RunConfig::resolve(command, flags).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("late-balance: {e}");
            e.exit_code()
        }
    }
}
