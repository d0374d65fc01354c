fn main() {
    std::process::exit(simshoot::cli::run(std::env::args_os()));
}
