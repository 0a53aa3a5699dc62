fn main() {
    std::process::exit(fpca::cli::run(std::env::args_os()));
}
