fn main() {
    std::process::exit(autolabel_cli::main_with(std::env::args_os()));
}
