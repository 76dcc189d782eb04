fn main() {
    std::process::exit(tagood::cli::run(std::env::args_os()));
}
