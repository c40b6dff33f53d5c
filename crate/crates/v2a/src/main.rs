fn main() {
    std::process::exit(v2a::cli::run(std::env::args()));
}
