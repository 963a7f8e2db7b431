fn main() {
    std::process::exit(semjitter::cli::run(std::env::args_os()));
}
