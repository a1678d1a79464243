fn main() {
    std::process::exit(ensemble_cli::run(std::env::args_os()));
}
