fn main() {
    std::process::exit(spanfuse::cli::run(std::env::args_os()));
}
