fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = lotseg_cli::run(std::env::args_os(), &lotseg_cli::config::process_env());
    std::process::exit(code);
}
