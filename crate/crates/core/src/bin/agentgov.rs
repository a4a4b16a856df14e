fn main() {
    std::process::exit(agentgov::cli::main_with_args(std::env::args_os()));
}
