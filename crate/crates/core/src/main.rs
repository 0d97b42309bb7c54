fn main() {
    std::process::exit(timegnn::cli::run(std::env::args_os()));
}
