use clap::Parser;
use flowlab::cli::{init_threads, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {}: {e}", e.category());
        std::process::exit(1);
    }
}
