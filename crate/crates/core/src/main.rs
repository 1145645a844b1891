fn main() {
    std::process::exit(prectime::cli::run(std::env::args_os()));
}
