fn main() {
    let code = tristeer::cli::run(std::env::args().skip(1));
    std::process::exit(code);
}
