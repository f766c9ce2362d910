fn main() {
    std::process::exit(n2k_core::cli::run(std::env::args_os()));
}
