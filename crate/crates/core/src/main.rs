fn main() {
    std::process::exit(maskform::cli::run(std::env::args_os()));
}
