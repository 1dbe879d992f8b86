fn main() {
    std::process::exit(amprune::cli::run(std::env::args_os()));
}
