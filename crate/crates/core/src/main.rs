fn main() {
    std::process::exit(ncc::runner::cli::run(std::env::args_os()));
}
