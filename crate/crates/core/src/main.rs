fn main() {
    std::process::exit(msdcda::cli::run(std::env::args_os()));
}
