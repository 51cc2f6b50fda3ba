fn main() {
    std::process::exit(derrt::bench::cli::run(std::env::args_os()));
}
