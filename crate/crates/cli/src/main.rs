fn main() {
    std::process::exit(probembed_cli::run_cli(std::env::args_os()));
}
