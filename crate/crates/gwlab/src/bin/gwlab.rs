fn main() {
    std::process::exit(gwlab::cli::main());
}
