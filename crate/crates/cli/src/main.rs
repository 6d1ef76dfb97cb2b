fn main() {
    std::process::exit(flowse_cli::run(std::env::args_os()));
}
