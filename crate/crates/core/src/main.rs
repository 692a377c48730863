fn main() {
    std::process::exit(l1fuse::cli::main_with_args(std::env::args_os()));
}
