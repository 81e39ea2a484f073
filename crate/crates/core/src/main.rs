fn main() {
    std::process::exit(vrnet::cli::run(std::env::args_os()));
}
