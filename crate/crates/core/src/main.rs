fn main() {
    std::process::exit(robustrisk::cli::main_with_args(std::env::args_os()));
}
