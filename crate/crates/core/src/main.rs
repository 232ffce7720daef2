fn main() {
    std::process::exit(tomopick::cli::run(std::env::args_os()));
}
