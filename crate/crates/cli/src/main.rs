fn main() {
    std::process::exit(elastic_dit_cli::main_with_args(std::env::args_os()));
}
