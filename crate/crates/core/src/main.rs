fn main() {
    std::process::exit(implicit_ce::cli::run_from_args(std::env::args_os()));
}
