use std::process::ExitCode;

use clap::Parser;
use tinymoe::cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
