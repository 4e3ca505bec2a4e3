fn main() {
    std::process::exit(sfpca::run_cli());
}
