use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = texsr_cli::Cli::parse();
    if let Err(err) = texsr_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(texsr_cli::exit_code(&err));
    }
}
