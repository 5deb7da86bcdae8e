fn main() {
    std::process::exit(critsmooth::cli::main_with_args(std::env::args_os()));
}
