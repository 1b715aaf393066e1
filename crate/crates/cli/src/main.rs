use std::process::ExitCode;

use clap::Parser;
use lqot_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("lqot: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
