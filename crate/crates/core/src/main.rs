fn main() {
    std::process::exit(rhosim::cli::run(std::env::args_os()));
}
