fn main() {
    std::process::exit(freezelab::cli::run(std::env::args_os()));
}
