fn main() {
    std::process::exit(uvcg::cli::run(std::env::args_os()));
}
