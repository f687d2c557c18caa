fn main() {
    std::process::exit(poelearn::cli_main());
}
