fn main() {
    std::process::exit(clinrisk::cli::cli_main(std::env::args_os()));
}
