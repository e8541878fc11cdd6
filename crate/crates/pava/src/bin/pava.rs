fn main() {
    std::process::exit(pava::cli::run(std::env::args_os()));
}
