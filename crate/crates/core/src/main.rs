fn main() {
    std::process::exit(dynpred::cli::run(std::env::args_os()));
}
