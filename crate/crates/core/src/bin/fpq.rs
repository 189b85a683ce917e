fn main() {
    std::process::exit(fpq_core::cli::main_with_args(std::env::args_os()));
}
