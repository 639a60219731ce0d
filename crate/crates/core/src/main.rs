fn main() {
    std::process::exit(dynuq::cli::run(std::env::args_os()));
}
