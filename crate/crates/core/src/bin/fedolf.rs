fn main() {
    std::process::exit(fedolf::cli::main_with_args(std::env::args_os()));
}
