use std::process::ExitCode;

use clap::Parser;
use fcluster::cli::{main_with, Cli};

fn main() -> ExitCode {
    match main_with(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
