fn main() {
    std::process::exit(diagsim_cli::run_command(std::env::args_os()));
}
