use std::process::ExitCode;

use clap::Parser;
use hegnn_cli::{execute, Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // a closed stdout pipe (e.g. `| head`) is not a failure
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hegnn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn broken_pipe(e: &CliError) -> bool {
    let io = match e {
        CliError::Io(io) => Some(io),
        CliError::Csv(c) => match c.kind() {
            csv::ErrorKind::Io(io) => Some(io),
            _ => None,
        },
        _ => None,
    };
    io.is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}
