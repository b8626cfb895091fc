fn main() {
    std::process::exit(aonn_cli::run(std::env::args()));
}
