fn main() {
    std::process::exit(grass_cli::dispatch(std::env::args_os()));
}
