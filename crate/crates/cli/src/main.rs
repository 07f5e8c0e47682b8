use clap::Parser;

use mmunet_cli::commands::{run, Cli};
use mmunet_cli::exit_code;

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
