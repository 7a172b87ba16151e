use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = fantrans_cli::Cli::parse();
    ExitCode::from(fantrans_cli::run(&cli))
}
