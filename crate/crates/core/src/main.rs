fn main() {
    std::process::exit(fateseg::cli::main_with_args(std::env::args_os()));
}
