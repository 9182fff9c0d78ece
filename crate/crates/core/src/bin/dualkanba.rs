fn main() {
    std::process::exit(dualkanba::cli::run(std::env::args_os()));
}
