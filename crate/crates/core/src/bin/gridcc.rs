fn main() {
    env_logger::init();
    std::process::exit(gridcc::cli::dispatch(std::env::args_os()));
}
