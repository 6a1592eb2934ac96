use clap::Parser;
use flowtame::cli::{exit_code, run, Cli};

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = run(cli);
    std::process::exit(exit_code(&result));
}
