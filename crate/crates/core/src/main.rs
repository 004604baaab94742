fn main() {
    std::process::exit(bdg::cli::run(std::env::args_os()));
}
