fn main() {
    std::process::exit(omkit_cli::main_with_args(std::env::args_os()));
}
