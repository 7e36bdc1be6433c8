fn main() {
    std::process::exit(pedcross::cli::run(std::env::args_os()));
}
