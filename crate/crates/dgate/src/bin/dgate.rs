fn main() {
    std::process::exit(dgate::cli::run(std::env::args_os()));
}
