fn main() {
    std::process::exit(ehsched::cli::main(std::env::args_os()));
}
