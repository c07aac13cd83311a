fn main() {
    std::process::exit(bspell::cli::run(std::env::args_os()));
}
