fn main() {
    std::process::exit(trajmoe::cli::run_from_args(std::env::args_os()));
}
