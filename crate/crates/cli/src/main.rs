fn main() {
    std::process::exit(unlearnlab_cli::run_command(std::env::args_os()));
}
