fn main() {
    std::process::exit(module_cli::cli::main_with_args(std::env::args_os()));
}
