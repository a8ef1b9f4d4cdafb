fn main() {
    std::process::exit(erann::cli::run());
}
