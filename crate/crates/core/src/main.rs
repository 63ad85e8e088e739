fn main() {
    std::process::exit(posealign::cli::main_with_args(std::env::args_os()));
}
