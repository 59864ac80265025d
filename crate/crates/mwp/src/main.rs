fn main() {
    std::process::exit(mwp::cli::cli(std::env::args().collect()));
}
