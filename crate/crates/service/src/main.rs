fn main() {
    std::process::exit(cellattr::cli::main());
}
