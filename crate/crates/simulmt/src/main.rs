fn main() {
    std::process::exit(simulmt::run_cli());
}
