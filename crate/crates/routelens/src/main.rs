fn main() {
    std::process::exit(routelens::cli::run(std::env::args().skip(1)));
}
