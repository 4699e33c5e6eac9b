use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    deltakit::cli::run(deltakit::cli::Cli::parse())
}
