fn main() {
    std::process::exit(nvsim_cli::main_with(std::env::args_os()));
}
