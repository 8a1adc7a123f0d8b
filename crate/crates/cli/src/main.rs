use std::process::ExitCode;

use clap::Parser;
use crossing_cli::{Cli, Status};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match crossing_cli::run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.text);
            match outcome.status {
                Status::Success => ExitCode::SUCCESS,
                Status::ChecksFailed => ExitCode::from(3),
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
