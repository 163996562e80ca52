use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = binet_cli::Cli::parse();
    if let Err(e) = binet_cli::execute(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(binet_cli::exit_code(&e));
    }
}
