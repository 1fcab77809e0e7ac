fn main() {
    std::process::exit(bounded_jm::cli::run(std::env::args_os()));
}
