fn main() {
    std::process::exit(cfaug::cli::run(std::env::args_os()));
}
