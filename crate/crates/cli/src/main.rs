fn main() {
    std::process::exit(hfcr_cli::run(std::env::args_os()));
}
