fn main() {
    std::process::exit(besa::cli::run(std::env::args_os()));
}
