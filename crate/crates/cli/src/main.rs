use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = kgd_cli::Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = kgd_cli::run(cli, &mut stdout.lock()) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
