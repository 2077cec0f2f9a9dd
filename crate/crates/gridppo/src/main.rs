fn main() {
    std::process::exit(gridppo::cli::run());
}
