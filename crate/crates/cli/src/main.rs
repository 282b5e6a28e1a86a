fn main() {
    std::process::exit(streetscape_cli::run_command(std::env::args_os()));
}
