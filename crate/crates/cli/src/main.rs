use std::process::ExitCode;

use bandex::commands::{dispatch, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("BANDEX_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("bandex: cannot size the worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("bandex: {e}");
            ExitCode::FAILURE
        }
    }
}
