fn main() {
    std::process::exit(clear_lab::cli::run(std::env::args_os()));
}
