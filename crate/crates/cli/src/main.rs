fn main() {
    std::process::exit(moler_cli::run(std::env::args_os()));
}
