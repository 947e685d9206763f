fn main() {
    std::process::exit(raa_mil::cli::dispatch(std::env::args_os()));
}
