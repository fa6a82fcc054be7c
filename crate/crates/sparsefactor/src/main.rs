fn main() {
    std::process::exit(sparsefactor::cli::run(std::env::args_os()));
}
