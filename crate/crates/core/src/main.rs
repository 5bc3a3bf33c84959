fn main() {
    std::process::exit(factored_nmt::cli::run(std::env::args().skip(1)));
}
