use std::process::ExitCode;

use clap::Parser;
use threshold_iv_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match threshold_iv_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("threshold-iv: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
