fn main() {
    std::process::exit(sketchloop::cli::dispatch(std::env::args_os()));
}
