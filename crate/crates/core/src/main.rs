use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use sinreq_core::cli::{execute, Cli};

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match execute(cli) {
        Ok(out) => {
            // a closed pipe on stdout is not an error worth a panic
            let _ = writeln!(std::io::stdout(), "{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
