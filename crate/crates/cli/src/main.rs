use std::process::ExitCode;

use bilateral_cli::{configure_threads, run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    // Flag errors exit with status 2 inside clap.
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli, &mut std::io::stdout().lock())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
