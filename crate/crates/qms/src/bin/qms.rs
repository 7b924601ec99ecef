fn main() {
    std::process::exit(qms::cli::main_with(std::env::args_os()));
}
