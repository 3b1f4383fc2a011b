fn main() {
    std::process::exit(panoduet::cli::run(std::env::args_os()));
}
