fn main() {
    std::process::exit(ovlabel_cli::main_with_args(std::env::args_os()));
}
