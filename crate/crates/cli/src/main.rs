use clap::Parser;
use svrc_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("svrc: {e}");
        std::process::exit(e.exit_code());
    }
}
