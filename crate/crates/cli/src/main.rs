use clap::Parser;

use edgeflow_cli::args::Cli;
use edgeflow_cli::{error_json, exit_code, run};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            std::process::exit(exit_code(&e));
        }
    }
}
