fn main() {
    std::process::exit(crossing_intent::cli::run(std::env::args_os()));
}
