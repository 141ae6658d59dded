fn main() {
    std::process::exit(conesplat_cli::run(std::env::args_os().collect()));
}
