fn main() {
    std::process::exit(crossmodal_seg::cli::main_with_args(std::env::args_os()));
}
