fn main() {
    std::process::exit(ddc_core::cli::run_cli(std::env::args_os()));
}
