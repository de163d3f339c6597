fn main() {
    std::process::exit(fiocalc::cli::main(std::env::args_os()));
}
