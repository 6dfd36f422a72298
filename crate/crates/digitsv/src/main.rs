use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = digitsv::cli::Cli::parse();
    match digitsv::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
