fn main() {
    std::process::exit(heatball::cli::run(std::env::args_os()));
}
