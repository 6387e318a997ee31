fn main() {
    std::process::exit(vidcolor::cli::run(std::env::args_os()));
}
