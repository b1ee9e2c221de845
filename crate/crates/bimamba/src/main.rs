fn main() {
    std::process::exit(bimamba::cli::run(std::env::args_os()));
}
