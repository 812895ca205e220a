fn main() {
    std::process::exit(rsc::cli::cli_main(std::env::args_os()));
}
