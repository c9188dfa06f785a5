fn main() {
    std::process::exit(dirm_cli::run(std::env::args_os()));
}
