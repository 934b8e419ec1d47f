fn main() {
    std::process::exit(perchat_cli::run(std::env::args_os()));
}
