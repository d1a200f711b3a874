fn main() {
    std::process::exit(kmcl::cli::main_with_args(std::env::args_os()));
}
