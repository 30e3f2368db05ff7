// SPDX-License-Identifier: MIT OR Apache-2.0

use std::process::ExitCode;

use clap::Parser;
use hijacklens_cli::{main_with, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(main_with(&cli))
}
