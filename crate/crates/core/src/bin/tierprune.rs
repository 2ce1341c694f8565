use std::io::Write;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use tierprune::cli::{execute, Cli, CliError};

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut out = std::io::stdout().lock();
    execute(cli, &mut out)?;
    out.flush().context("flushing stdout")?;
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(3, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
