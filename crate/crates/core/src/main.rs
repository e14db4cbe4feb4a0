fn main() {
    std::process::exit(multihom::cli::dispatch(std::env::args().collect()));
}
