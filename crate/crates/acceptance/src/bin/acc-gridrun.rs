fn main() {
    std::process::exit(gridrun::cli_main());
}
