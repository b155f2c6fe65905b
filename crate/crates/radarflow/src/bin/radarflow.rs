fn main() {
    std::process::exit(radarflow::cli::run(std::env::args_os()));
}
