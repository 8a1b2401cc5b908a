fn main() {
    std::process::exit(ocs::cli::dispatch(std::env::args().skip(1)));
}
