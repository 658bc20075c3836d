fn main() {
    std::process::exit(optinject::cli::run());
}
