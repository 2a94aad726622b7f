fn main() {
    std::process::exit(cdds_cli::run_cli(std::env::args_os()));
}
