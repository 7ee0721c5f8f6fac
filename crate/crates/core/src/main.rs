fn main() {
    std::process::exit(sfg_swinsr::cli::run(std::env::args_os()));
}
