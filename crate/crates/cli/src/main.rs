mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::Cli;

/// An error caused by how the program was invoked rather than by what it
/// then tried to do.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const USAGE: u8 = 1;
const FAILURE: u8 = 2;

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let mut cmd = Cli::command();
    let argv = match config::expand(argv, &cmd) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(USAGE);
        }
    };
    let matches = match cmd.try_get_matches_from_mut(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(USAGE);
        }
    };
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let sub = cmd.find_subcommand(name).expect("known subcommand");
    let mut resolved = config::resolved(sub, sub_matches);
    if let Some(t) = cli.threads {
        resolved.push(("threads".into(), t.to_string()));
    }
    println!("# csal {name} — resolved configuration");
    print!("{}", config::render(&resolved));

    match commands::run(cli, &resolved) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::from(FAILURE)
            }
        }
    }
}
