fn main() {
    std::process::exit(dropal_cli::main_with_args(std::env::args_os()));
}
