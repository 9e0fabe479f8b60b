fn main() {
    std::process::exit(istarkit::cli::run(std::env::args_os()));
}
