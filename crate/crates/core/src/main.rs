fn main() {
    std::process::exit(topofuse::cli::run(std::env::args_os()));
}
