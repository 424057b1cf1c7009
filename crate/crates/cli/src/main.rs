fn main() {
    std::process::exit(fairgkd_cli::main_with(std::env::args_os()));
}
