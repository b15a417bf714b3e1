fn main() {
    std::process::exit(regloc_cli::dispatch(std::env::args_os()));
}
