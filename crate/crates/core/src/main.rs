fn main() {
    std::process::exit(gamask::run_cli());
}
