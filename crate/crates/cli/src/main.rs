fn main() {
    std::process::exit(splatfield_cli::main_with_args(std::env::args_os()));
}
