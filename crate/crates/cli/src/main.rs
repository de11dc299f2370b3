fn main() {
    std::process::exit(molt_cli::run(std::env::args_os()));
}
