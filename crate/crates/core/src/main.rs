fn main() {
    std::process::exit(gridflow::cli::main_with_args(std::env::args_os()));
}
