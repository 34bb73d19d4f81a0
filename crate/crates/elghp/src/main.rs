fn main() {
    std::process::exit(elghp::cli::run());
}
