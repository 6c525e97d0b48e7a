//! Mock model adapter speaking the line-delimited JSON protocol on stdio.

use std::io::{stdin, stdout, BufWriter};
use std::process::ExitCode;

use corpus_forge::adapter::mock::{serve, ServeExit, ServeOptions};

fn main() -> ExitCode {
    let options = match ServeOptions::from_args(std::env::args().skip(1)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    match serve(stdin().lock(), BufWriter::new(stdout().lock()), &options) {
        Ok(ServeExit::Eof) => ExitCode::SUCCESS,
        Ok(ServeExit::Crash) => std::process::abort(),
        Err(e) => {
            eprintln!("mock adapter: {e}");
            ExitCode::FAILURE
        }
    }
}
