fn main() {
    std::process::exit(relaxlab::lab::cli::run(std::env::args_os()));
}
