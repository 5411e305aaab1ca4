fn main() {
    std::process::exit(rankpeer::cli::run(std::env::args_os()));
}
