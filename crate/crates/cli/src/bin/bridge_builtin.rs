//! Serves a built-in imputer over the bridge protocol on stdin/stdout.
//!
//! Usage: `dimsum-bridge-builtin [SPEC]` (default `linear`).

use std::io::{stdin, stdout, BufWriter};
use std::process::ExitCode;

use dimsum::imputers::{serve, ImputerRegistry};

fn main() -> ExitCode {
    let spec = std::env::args().nth(1).unwrap_or_else(|| "linear".into());
    let factory = match ImputerRegistry::builtin().factory(&spec) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match serve(stdin().lock(), BufWriter::new(stdout().lock()), &factory) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
