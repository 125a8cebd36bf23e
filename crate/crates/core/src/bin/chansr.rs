fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    chansr::runtime::init_threads_from_env();
    std::process::exit(chansr::cli::parse_and_dispatch(std::env::args_os()));
}
