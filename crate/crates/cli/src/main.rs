fn main() {
    std::process::exit(dhn_cli::run(std::env::args_os()));
}
