fn main() {
    std::process::exit(sslab_cli::main_with(std::env::args_os()));
}
