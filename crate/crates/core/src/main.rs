fn main() {
    std::process::exit(iabsim::cli::run_cli(std::env::args_os()));
}
