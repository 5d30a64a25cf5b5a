use clap::Parser;

use tsegrid::cli::{self, exit, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = cli::init_threads().and_then(|()| cli::run(parsed)).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        cli::exit_code(&e)
    });
    std::process::exit(code);
}
