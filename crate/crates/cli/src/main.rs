fn main() {
    std::process::exit(iseat_cli::main_with(std::env::args_os()));
}
