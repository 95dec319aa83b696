fn main() {
    std::process::exit(chanalign::cli::run_from(std::env::args_os()));
}
