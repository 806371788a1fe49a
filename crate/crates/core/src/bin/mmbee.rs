fn main() {
    std::process::exit(mmbee::cli::run(std::env::args_os()));
}
