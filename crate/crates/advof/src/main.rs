fn main() {
    std::process::exit(advof::cli::main_with(std::env::args_os()));
}
