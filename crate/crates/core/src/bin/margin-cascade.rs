fn main() {
    std::process::exit(margin_cascade::cli::main_with_args(std::env::args_os()));
}
