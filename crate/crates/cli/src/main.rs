fn main() {
    std::process::exit(lwi_cli::main_with_args(std::env::args_os()));
}
