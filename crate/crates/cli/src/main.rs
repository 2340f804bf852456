fn main() {
    std::process::exit(perceptscore_cli::app::main_with_args(std::env::args_os()));
}
