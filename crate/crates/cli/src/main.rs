fn main() {
    std::process::exit(deepssm_cli::run(std::env::args_os()));
}
