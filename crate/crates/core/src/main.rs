fn main() {
    std::process::exit(kernquant::cli::run(std::env::args_os()));
}
