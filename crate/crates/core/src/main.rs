fn main() {
    std::process::exit(reland::cli::run(std::env::args_os()));
}
