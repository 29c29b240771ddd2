fn main() {
    std::process::exit(w2v2_speaker::cli::run(std::env::args_os()));
}
