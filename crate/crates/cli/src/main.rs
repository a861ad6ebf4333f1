fn main() {
    std::process::exit(vcsl_cli::run_command(std::env::args_os()));
}
