fn main() {
    std::process::exit(lazyflow::cli::main_with_args(std::env::args_os()));
}
