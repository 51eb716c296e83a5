use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = collage_service::cli::Cli::parse();
    std::process::exit(collage_service::cli::run(args));
}
