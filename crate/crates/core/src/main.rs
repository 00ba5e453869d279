fn main() {
    std::process::exit(selfcal_core::cli::run_cli(std::env::args_os()));
}
