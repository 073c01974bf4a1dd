fn main() {
    std::process::exit(muteswap::cli::run(std::env::args_os()));
}
