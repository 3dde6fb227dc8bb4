fn main() {
    std::process::exit(flag_cli::run(std::env::args_os()));
}
