fn main() {
    std::process::exit(gssl::cli::main(std::env::args_os()));
}
