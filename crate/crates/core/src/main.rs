use std::process::ExitCode;

use clap::Parser;
use nfm::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let category = e.category();
            eprintln!("error ({category:?}): {e}");
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
