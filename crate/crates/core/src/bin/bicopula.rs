fn main() {
    std::process::exit(bicopula::cli::run(std::env::args_os()));
}
