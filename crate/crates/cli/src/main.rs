fn main() {
    std::process::exit(inmass_cli::main_with_args(std::env::args_os()));
}
