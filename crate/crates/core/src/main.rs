fn main() {
    std::process::exit(alto::cli::main());
}
