fn main() {
    std::process::exit(explainer::cli::main_with_args(std::env::args_os()));
}
