fn main() {
    std::process::exit(qcoupling::cli::main_with_args(std::env::args_os()));
}
