fn main() {
    std::process::exit(seqvpr::cli::run(std::env::args_os()));
}
