use clap::Parser;
use fedsel_cli::{execute, init_logging, Cli};

fn main() {
    let cli = Cli::parse();
    init_logging(cli.quiet, cli.json_logs);
    if let Err(f) = execute(cli) {
        eprintln!("error: {:#}", f.error);
        std::process::exit(f.code);
    }
}
