fn main() {
    std::process::exit(statdiff::cli::run_placeholder());
}
