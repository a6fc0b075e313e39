//! Command-line driver and review service for the annotation pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod lock;
pub mod service;

use std::io::Write;

use clap::Parser;

pub use commands::Cli;
pub use error::CliError;

/// Parses `args`, runs the command and returns the process exit status.
/// Results go to `out`; errors go to `err` as one JSON line.
pub fn main_with(
    args: impl IntoIterator<Item = std::ffi::OsString>,
    vars: &[(String, String)],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    let command = cli.command.name();
    let result = commands::resolve_config(&cli, vars).and_then(|cfg| commands::run(&cli, &cfg, out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_json(command));
            e.exit_code()
        }
    }
}
