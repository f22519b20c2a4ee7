fn main() {
    std::process::exit(hybridcat::cli::run(std::env::args_os()));
}
