fn main() {
    std::process::exit(cfscm::cli::main_with_args(std::env::args_os()));
}
