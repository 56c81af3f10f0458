use std::process::ExitCode;

use clap::Parser;
use crfiqa_cli::{init_logging, run, Cli};

fn main() -> ExitCode {
    init_logging();
    // clap exits with 2 on usage errors and 0 for --help/--version
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
