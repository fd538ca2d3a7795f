fn main() {
    std::process::exit(concentrate::cli::dispatch());
}
