fn main() {
    std::process::exit(unmt::cli::main_from_env());
}
