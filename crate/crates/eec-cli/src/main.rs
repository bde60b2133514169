fn main() {
    std::process::exit(eec_cli::dispatch(std::env::args_os()));
}
