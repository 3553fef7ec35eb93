fn main() {
    std::process::exit(emofuse::cli::main());
}
