fn main() {
    std::process::exit(safe_reach::cli::dispatch(std::env::args_os()));
}
