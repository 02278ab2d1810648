fn main() {
    std::process::exit(tracecheck::cli::run(std::env::args_os()));
}
