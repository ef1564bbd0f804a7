fn main() {
    std::process::exit(egnn::cli::run());
}
