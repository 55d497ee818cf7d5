use clap::Parser;
use rwkv_perspectives::cli::{format_error, run, Cli};

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("{}", format_error(&e));
        std::process::exit(1);
    }
}
