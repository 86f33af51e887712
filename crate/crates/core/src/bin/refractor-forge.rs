fn main() {
    std::process::exit(refractor_forge::cli::main());
}
