fn main() {
    std::process::exit(wasiprof::cli::run(std::env::args_os()));
}
