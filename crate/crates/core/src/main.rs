fn main() {
    std::process::exit(lowrank::cli::main_with_args(std::env::args_os()));
}
