use clap::Parser;

use unitforge_cli::error::exit;
use unitforge_cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNITFORGE_LOG", "warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    // usage errors exit 2 through clap
    let cli = Cli::parse();
    match execute(&cli, &args) {
        Ok(_) => std::process::exit(exit::OK),
        Err(e) => {
            eprintln!("unitforge: {e}");
            std::process::exit(e.code);
        }
    }
}
