fn main() {
    std::process::exit(morphflow::cli::run(std::env::args()));
}
