fn main() {
    std::process::exit(picr::cli::run());
}
