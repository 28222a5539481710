fn main() {
    std::process::exit(zipmerge::cli::run());
}
