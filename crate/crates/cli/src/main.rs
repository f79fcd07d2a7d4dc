fn main() {
    std::process::exit(lg3d_cli::run(std::env::args().collect()));
}
