fn main() {
    std::process::exit(kelly_ou::cli::main_with_args(std::env::args_os()));
}
