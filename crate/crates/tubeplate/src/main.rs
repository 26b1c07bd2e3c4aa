fn main() {
    std::process::exit(tubeplate::cli::main_with_args(std::env::args_os()));
}
