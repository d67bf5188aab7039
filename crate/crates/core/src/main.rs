fn main() {
    std::process::exit(eiph::cli::run_cli(std::env::args_os()));
}
