fn main() {
    std::process::exit(styleguide::harness::cli::run(std::env::args_os()));
}
