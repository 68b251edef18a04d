use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = agd::harness::cli::Cli::parse();
    if let Err(e) = agd::harness::cli::execute(cli) {
        eprintln!("{}", agd::harness::cli::error_line(&e));
        std::process::exit(1);
    }
}
