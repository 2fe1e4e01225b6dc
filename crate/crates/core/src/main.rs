fn main() {
    std::process::exit(edgefool_core::cli::run(std::env::args_os()));
}
