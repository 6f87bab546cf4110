//! Command-line front end for `threshold-iv`.

pub mod args;
pub mod commands;
pub mod error;
pub mod input;

use std::path::Path;

use args::{Cli, Command};
use error::{CliError, CliResult};

/// Environment variable fixing the worker-thread count.
pub const THREADS_ENV: &str = "THRESHOLD_IV_THREADS";

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second initialisation in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    init_threads()?;
    match &cli.command {
        Command::Test(a) => emit(a.output.out.as_deref(), &commands::test(a)?),
        Command::FirstStage(a) => emit(a.output.out.as_deref(), &commands::first_stage(a)?),
        Command::Sequence(a) => emit(a.output.out.as_deref(), &commands::sequence(a)?),
        Command::Simulate(a) => emit(a.output.out.as_deref(), &commands::simulate(a)?),
        Command::Generate(a) => emit(a.out.as_deref(), &commands::generate_csv(a)?),
    }
}
