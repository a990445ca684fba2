fn main() {
    std::process::exit(skyroute::cli::run(std::env::args_os()));
}
