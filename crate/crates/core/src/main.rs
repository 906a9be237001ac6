fn main() {
    std::process::exit(hypokernel::cli::run(std::env::args_os()));
}
