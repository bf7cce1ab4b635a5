fn main() {
    std::process::exit(fracsrf_cli::run(std::env::args_os()));
}
