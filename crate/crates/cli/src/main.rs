fn main() {
    std::process::exit(wmka_cli::main_with_args(std::env::args_os()));
}
