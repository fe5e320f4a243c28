use std::process::ExitCode;

use clap::Parser;
use lsd_cli::{run, Args};

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lsd: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
