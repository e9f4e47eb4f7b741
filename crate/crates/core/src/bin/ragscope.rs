fn main() {
    std::process::exit(ragscope::cli::dispatch(std::env::args_os()));
}
