use clap::Parser;
use lunet::cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = execute(cli, &mut stdout.lock()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
