fn main() {
    std::process::exit(comve_lab::cli::run(std::env::args_os()));
}
