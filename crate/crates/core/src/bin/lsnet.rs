fn main() {
    std::process::exit(lsnet_core::cli::run(std::env::args_os()));
}
