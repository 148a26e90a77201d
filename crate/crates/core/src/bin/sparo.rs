fn main() {
    std::process::exit(sparo_core::harness::cli::run(std::env::args_os()));
}
