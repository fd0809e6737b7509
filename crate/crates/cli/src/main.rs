use std::process::ExitCode;

use clap::Parser;
use seastar_cli::{run, Cli};
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    // Usage errors exit with 2 (clap's convention); --help and --version with 0.
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("SEASTAR_LOG_LEVEL").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seastar: {e}");
            ExitCode::from(1)
        }
    }
}
