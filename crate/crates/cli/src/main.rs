fn main() {
    std::process::exit(auprompt_cli::main_with(std::env::args_os()));
}
