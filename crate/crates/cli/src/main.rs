fn main() {
    std::process::exit(biva_cli::run_args(std::env::args_os()));
}
