fn main() {
    std::process::exit(latdur::cli::run(std::env::args_os()));
}
