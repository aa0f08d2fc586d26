fn main() {
    std::process::exit(searth::cli::cli_main(std::env::args_os()));
}
