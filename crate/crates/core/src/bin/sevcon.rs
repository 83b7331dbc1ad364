fn main() {
    std::process::exit(sevcon::cli::main_with_args(std::env::args_os()));
}
