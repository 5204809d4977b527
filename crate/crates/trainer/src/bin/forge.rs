fn main() {
    std::process::exit(forge_trainer::cli::main_with_args(std::env::args_os()));
}
